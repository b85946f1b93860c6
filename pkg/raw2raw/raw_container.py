# raw2raw/raw_container.py
"""RAW frame ingestion, packing, orientation and the .rgg4 container.

A RawFrame is four half-resolution planes in canonical (R, Gr, Gb, B) order,
normalised to [0, 1] and stored as float32. Gr is the green photosite that
shares a row with red, Gb the one that shares a row with blue.
"""
import json
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from raw2raw import config
from raw2raw.exceptions import ConfigError, FormatError, MetadataError, ShapeMismatchError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHANNEL_NAMES = ("R", "Gr", "Gb", "B")


class CfaPattern(str, Enum):
    RGGB = "RGGB"
    BGGR = "BGGR"
    GRBG = "GRBG"
    GBRG = "GBRG"


class Orientation(str, Enum):
    """How the stored frame must be turned to stand upright.

    RotN = rotate N degrees counter-clockwise; FlipH mirrors columns, FlipV rows.
    """
    NORMAL = "Normal"
    ROT90 = "Rot90"
    ROT180 = "Rot180"
    ROT270 = "Rot270"
    FLIP_H = "FlipH"
    FLIP_V = "FlipV"


# (row, col) offset inside the 2x2 tile for R, Gr, Gb, B
_CFA_OFFSETS = {
    CfaPattern.RGGB: ((0, 0), (0, 1), (1, 0), (1, 1)),
    CfaPattern.BGGR: ((1, 1), (1, 0), (0, 1), (0, 0)),
    CfaPattern.GRBG: ((0, 1), (0, 0), (1, 1), (1, 0)),
    CfaPattern.GBRG: ((1, 0), (1, 1), (0, 0), (0, 1)),
}


# ---- Metadata ----
class CameraMeta(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    camera_id: str
    black_level: tuple[int, int, int, int]
    white_level: int
    orientation: Orientation = Orientation.NORMAL
    iso: Optional[int] = None

    @model_validator(mode="after")
    def _levels(self):
        if any(b >= self.white_level for b in self.black_level):
            raise ValueError(
                f"black_level {list(self.black_level)} must be below white_level {self.white_level}"
            )
        return self


class FrameSidecar(CameraMeta):
    """The <name>.json file stored next to a mosaic or a .rgg4 container."""
    cfa_pattern: CfaPattern = Field(default=CfaPattern.RGGB)

    def camera_meta(self) -> CameraMeta:
        return CameraMeta(**self.model_dump(exclude={"cfa_pattern"}))


def make_meta(**fields) -> CameraMeta:
    try:
        return CameraMeta(**fields)
    except ValidationError as e:
        raise MetadataError(f"invalid camera metadata: {e}") from e


# ---- Frames ----
@dataclass(frozen=True)
class RawMosaic:
    data: np.ndarray
    max_value: int
    cfa_pattern: CfaPattern = CfaPattern.RGGB

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 2:
            raise FormatError(f"mosaic must be 2-D, got shape {data.shape}")
        if data.shape[0] % 2 or data.shape[1] % 2:
            raise FormatError(f"mosaic dimensions must be even, got {data.shape[1]}x{data.shape[0]}")
        if data.size and (data.min() < 0 or data.max() > self.max_value):
            raise FormatError(f"mosaic values must lie in 0..{self.max_value}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "cfa_pattern", CfaPattern(self.cfa_pattern))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class RawFrame:
    channels: np.ndarray  # (4, h, w) float32 in [0, 1]
    meta: CameraMeta

    def __post_init__(self):
        ch = np.array(self.channels, dtype=np.float32, copy=True)
        if ch.ndim != 3 or ch.shape[0] != 4:
            raise ShapeMismatchError(f"frame must hold 4 planes, got shape {ch.shape}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels.shape

    def replace(self, channels: Optional[np.ndarray] = None, meta: Optional[CameraMeta] = None) -> "RawFrame":
        return RawFrame(
            channels=self.channels if channels is None else channels,
            meta=self.meta if meta is None else meta,
        )


# ---- Packing & normalisation ----
def pack_rggb(mosaic: RawMosaic) -> np.ndarray:
    """Split the mosaic into (R, Gr, Gb, B) planes, whatever its CFA layout."""
    offsets = _CFA_OFFSETS[mosaic.cfa_pattern]
    return np.stack([mosaic.data[r::2, c::2] for r, c in offsets])


def unpack_rggb(planes: np.ndarray, cfa_pattern: CfaPattern = CfaPattern.RGGB) -> np.ndarray:
    planes = np.asarray(planes)
    if planes.ndim != 3 or planes.shape[0] != 4:
        raise ShapeMismatchError(f"expected (4, h, w) planes, got {planes.shape}")
    _, h, w = planes.shape
    out = np.empty((2 * h, 2 * w), dtype=planes.dtype)
    for plane, (r, c) in zip(planes, _CFA_OFFSETS[CfaPattern(cfa_pattern)]):
        out[r::2, c::2] = plane
    return out


def normalize_raw(mosaic: RawMosaic, meta: CameraMeta) -> RawFrame:
    black = np.asarray(meta.black_level, dtype=np.float64)
    white = float(meta.white_level)
    if np.any(black >= white):
        raise MetadataError(f"black_level {list(meta.black_level)} must be below white_level {meta.white_level}")

    planes = pack_rggb(mosaic).astype(np.float64)
    scaled = (planes - black[:, None, None]) / (white - black)[:, None, None]
    return RawFrame(channels=np.clip(scaled, 0.0, 1.0), meta=meta)


# ---- Orientation ----
def _to_normal(planes: np.ndarray, orientation: Orientation) -> np.ndarray:
    if orientation == Orientation.ROT90:
        return np.rot90(planes, k=1, axes=(1, 2))
    if orientation == Orientation.ROT180:
        return np.rot90(planes, k=2, axes=(1, 2))
    if orientation == Orientation.ROT270:
        return np.rot90(planes, k=3, axes=(1, 2))
    if orientation == Orientation.FLIP_H:
        return planes[:, :, ::-1]
    if orientation == Orientation.FLIP_V:
        return planes[:, ::-1, :]
    return planes


def _from_normal(planes: np.ndarray, orientation: Orientation) -> np.ndarray:
    if orientation in (Orientation.ROT90, Orientation.ROT180, Orientation.ROT270):
        k = {Orientation.ROT90: 1, Orientation.ROT180: 2, Orientation.ROT270: 3}[orientation]
        return np.rot90(planes, k=-k, axes=(1, 2))
    # flips are their own inverse
    return _to_normal(planes, orientation)


def orient(frame: RawFrame) -> RawFrame:
    """Return the frame turned upright, labelled Normal."""
    orientation = Orientation(frame.meta.orientation)
    if orientation == Orientation.NORMAL:
        return frame
    meta = frame.meta.model_copy(update={"orientation": Orientation.NORMAL})
    return RawFrame(channels=_to_normal(frame.channels, orientation), meta=meta)


def apply_orientation(frame: RawFrame, orientation: Orientation) -> RawFrame:
    """Inverse of orient: store an upright frame as if captured with `orientation`."""
    upright = orient(frame)
    orientation = Orientation(orientation)
    meta = upright.meta.model_copy(update={"orientation": orientation})
    return RawFrame(channels=_from_normal(upright.channels, orientation), meta=meta)


# ---- Spatial normalisation ----
def center_crop(frame: RawFrame, height: int, width: int) -> RawFrame:
    if height < 1 or width < 1 or height > frame.height or width > frame.width:
        raise ConfigError(f"cannot crop {frame.width}x{frame.height} planes to {width}x{height}")
    top = (frame.height - height) // 2
    left = (frame.width - width) // 2
    return frame.replace(channels=frame.channels[:, top:top + height, left:left + width])


def downsample(frame: RawFrame, factor: int) -> RawFrame:
    """Integer box averaging; trailing rows/cols that do not fill a block are dropped."""
    if factor < 1:
        raise ConfigError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return frame
    h, w = frame.height // factor, frame.width // factor
    if h == 0 or w == 0:
        raise ConfigError(f"frame {frame.width}x{frame.height} too small for factor {factor}")
    blocks = frame.channels[:, :h * factor, :w * factor].astype(np.float64)
    blocks = blocks.reshape(4, h, factor, w, factor)
    return frame.replace(channels=blocks.mean(axis=(2, 4)))


def fit_resolution(frame: RawFrame, height: int, width: int) -> RawFrame:
    """Center-crop and box-downsample so the planes end up exactly height x width."""
    if height < 1 or width < 1:
        raise ConfigError(f"target resolution must be positive, got {width}x{height}")
    factor = min(frame.height // height, frame.width // width)
    if factor < 1:
        raise ConfigError(f"frame {frame.width}x{frame.height} is smaller than {width}x{height}")
    cropped = center_crop(frame, height * factor, width * factor)
    return downsample(cropped, factor)


# ---- Brightness statistics ----
def channel_mean_vector(frame: RawFrame) -> np.ndarray:
    if frame.height == 0 or frame.width == 0:
        raise FormatError("channel mean of an empty frame")
    return frame.channels.mean(axis=(1, 2), dtype=np.float64)


def select_reference(query: RawFrame, candidates: Sequence[RawFrame]) -> int:
    """Index of the candidate whose channel-mean vector is closest (Euclidean) to the query's."""
    if not candidates:
        raise ConfigError("select_reference needs at least one candidate")
    q = channel_mean_vector(query)
    dists = np.array([np.linalg.norm(channel_mean_vector(c) - q) for c in candidates])
    # argmin returns the first minimum: ties go to the lowest index
    return int(np.argmin(dists))


# ---- Sidecar ----
def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


class _SidecarFile(BaseModel):
    """On-disk sidecar: every key present, no coercion of strings or floats."""
    model_config = ConfigDict(extra="forbid", strict=True)

    camera_id: str
    black_level: tuple[int, int, int, int]
    white_level: int
    orientation: Orientation
    iso: Optional[int]
    cfa_pattern: CfaPattern


def read_sidecar(path: PathLike) -> FrameSidecar:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise MetadataError(f"metadata sidecar not found: {path}") from e
    try:
        raw = _SidecarFile.model_validate_json(text)
        return FrameSidecar(**raw.model_dump())
    except ValidationError as e:
        raise MetadataError(f"metadata sidecar {path} failed validation: {e}") from e


def write_sidecar(meta: CameraMeta, path: PathLike, cfa_pattern: CfaPattern = CfaPattern.RGGB) -> Path:
    path = Path(path)
    sidecar = FrameSidecar(**meta.model_dump(), cfa_pattern=cfa_pattern)
    path.write_text(json.dumps(sidecar.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---- .rgg4 container ----
_HEADER = struct.Struct("<4sHII")


def write_frame(frame: RawFrame, path: PathLike) -> Path:
    """Write the .rgg4 container plus its <name>.json sidecar."""
    path = Path(path)
    header = _HEADER.pack(config.RGG4_MAGIC, config.RGG4_VERSION, frame.width, frame.height)
    payload = frame.channels.astype("<f4", copy=False).tobytes(order="C")
    path.write_bytes(header + payload)
    write_sidecar(frame.meta, sidecar_path(path))
    logger.debug("[INGEST] wrote %s (%dx%d planes)", path, frame.width, frame.height)
    return path


def read_frame(path: PathLike) -> RawFrame:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"frame not found: {path}") from e
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, height = _HEADER.unpack_from(blob)
    if magic != config.RGG4_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {config.RGG4_MAGIC!r}")
    if version != config.RGG4_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    expected = 4 * width * height * 4
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    planes = np.frombuffer(payload, dtype="<f4").reshape(4, height, width)
    # NaN fails both comparisons, so it is rejected here too
    if planes.size and not np.all((planes >= 0.0) & (planes <= 1.0)):
        raise FormatError(f"{path}: plane values must lie in [0, 1]")
    meta = read_sidecar(sidecar_path(path)).camera_meta()
    return RawFrame(channels=planes, meta=meta)


# ---- PGM mosaics ----
def _pgm_maxval(img: Image.Image) -> int:
    """Header maxval; Pillow rescales samples to the mode's full range unless it is 255 or 65535."""
    decoder, _, _, args = img.tile[0]
    if decoder == "ppm_plain":
        raise FormatError("plain (ASCII) PGM is not supported, expected binary P5")
    if decoder == "ppm":
        return int(args[-1])
    return 65535 if img.mode == "I" else 255


def read_pgm(path: PathLike, cfa_pattern: CfaPattern = CfaPattern.RGGB) -> RawMosaic:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"mosaic not found: {path}")
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode not in ("L", "I"):
                raise FormatError(f"{path}: not a grayscale PGM ({img.format} {img.mode})")
            maxval = _pgm_maxval(img)
            full_scale = 65535 if img.mode == "I" else 255
            data = np.asarray(img, dtype=np.int64)
    except (OSError, SyntaxError, ValueError) as e:
        raise FormatError(f"{path}: unreadable PGM: {e}") from e
    if maxval != full_scale:
        data = np.rint(data * (maxval / full_scale)).astype(np.int64)
    return RawMosaic(data=data.astype(np.uint16), max_value=maxval, cfa_pattern=cfa_pattern)


def write_pgm(mosaic: RawMosaic, path: PathLike) -> Path:
    """Binary P5; samples are stored as-is with maxval 255 or 65535."""
    path = Path(path)
    if mosaic.max_value > 255:
        img = Image.fromarray(mosaic.data.astype(np.int32))
    else:
        img = Image.fromarray(mosaic.data.astype(np.uint8))
    img.save(path, format="PPM")
    return path


def ingest_pgm(mosaic_path: PathLike, meta_path: PathLike) -> RawFrame:
    """PGM mosaic + sidecar -> normalised frame (orientation still as captured)."""
    sidecar = read_sidecar(meta_path)
    mosaic = read_pgm(mosaic_path, cfa_pattern=sidecar.cfa_pattern)
    logger.info("[INGEST] %s: %dx%d %s, camera=%s", mosaic_path, mosaic.width, mosaic.height,
                sidecar.cfa_pattern.value, sidecar.camera_id)
    return normalize_raw(mosaic, sidecar.camera_meta())
