# raw2raw/calibration.py
"""Global RAW-to-RAW calibration baselines.

A map is a single matrix M applied per pixel, out = phi(pixel) @ M, where phi
is the identity (linear4), green-averaged RGB (rgb3) or the 14-term quadratic
expansion (quad14).
"""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import linalg

from raw2raw.exceptions import (
    FormatError,
    InsufficientSamplesError,
    RankDeficientError,
    ShapeMismatchError,
)
from raw2raw.raw_container import RawFrame

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class CalibrationKind(str, Enum):
    LINEAR4 = "linear4"
    RGB3 = "rgb3"
    QUAD14 = "quad14"


# (features in, channels out)
MATRIX_SHAPES = {
    CalibrationKind.LINEAR4: (4, 4),
    CalibrationKind.RGB3: (3, 3),
    CalibrationKind.QUAD14: (14, 4),
}

QUAD_TERMS = (
    "r^2", "gr^2", "gb^2", "b^2",
    "r*gr", "r*gb", "r*b", "gr*gb", "gr*b", "gb*b",
    "r", "gr", "gb", "b",
)

# channel pairs of the six cross products, lexicographic
_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


@dataclass(frozen=True)
class CalibrationMap:
    kind: CalibrationKind
    matrix: np.ndarray
    source_camera: str = ""
    target_camera: str = ""

    def __post_init__(self):
        kind = CalibrationKind(self.kind)
        matrix = np.array(self.matrix, dtype=np.float64, copy=True)
        if matrix.shape != MATRIX_SHAPES[kind]:
            raise FormatError(f"{kind.value} map needs a {MATRIX_SHAPES[kind]} matrix, got {matrix.shape}")
        matrix.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "matrix", matrix)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "matrix": self.matrix.tolist(),
            "source_camera": self.source_camera,
            "target_camera": self.target_camera,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CalibrationMap":
        try:
            raw = _MapFile.model_validate(payload)
        except ValidationError as e:
            raise FormatError(f"calibration map failed schema validation: {e}") from e
        if any(len(row) != len(raw.matrix[0]) for row in raw.matrix):
            raise FormatError("calibration matrix rows differ in length")
        return cls(
            kind=raw.kind,
            matrix=raw.matrix,
            source_camera=raw.source_camera,
            target_camera=raw.target_camera,
        )


class _MapFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: CalibrationKind
    matrix: list[list[float]] = Field(min_length=1)
    source_camera: str = ""
    target_camera: str = ""


def identity_map(kind: CalibrationKind) -> CalibrationMap:
    kind = CalibrationKind(kind)
    if kind == CalibrationKind.QUAD14:
        matrix = np.zeros((14, 4))
        matrix[10:, :] = np.eye(4)
    else:
        matrix = np.eye(MATRIX_SHAPES[kind][0])
    return CalibrationMap(kind=kind, matrix=matrix)


# ---- Features ----
def quad_expand(pixel) -> np.ndarray:
    """14-term expansion: 4 squares, 6 cross products, 4 linear terms. Works on (..., 4)."""
    p = np.asarray(pixel, dtype=np.float64)
    if p.shape[-1] != 4:
        raise ShapeMismatchError(f"quad_expand needs 4 channels, got {p.shape}")
    squares = p * p
    products = np.stack([p[..., i] * p[..., j] for i, j in _PAIRS], axis=-1)
    return np.concatenate([squares, products, p], axis=-1)


def to_rgb3(pixels) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    return np.stack([p[..., 0], 0.5 * (p[..., 1] + p[..., 2]), p[..., 3]], axis=-1)


def _features(pixels: np.ndarray, kind: CalibrationKind) -> np.ndarray:
    if kind == CalibrationKind.QUAD14:
        return quad_expand(pixels)
    if kind == CalibrationKind.RGB3:
        return to_rgb3(pixels)
    return np.asarray(pixels, dtype=np.float64)


def _targets(pixels: np.ndarray, kind: CalibrationKind) -> np.ndarray:
    if kind == CalibrationKind.RGB3:
        return to_rgb3(pixels)
    return np.asarray(pixels, dtype=np.float64)


def frame_pixels(frame: RawFrame) -> np.ndarray:
    """(N, 4) pixel rows in (R, Gr, Gb, B) order."""
    return frame.channels.reshape(4, -1).T.astype(np.float64)


# ---- Fit / apply ----
def fit_calibration(
    src,
    tgt,
    kind: CalibrationKind = CalibrationKind.QUAD14,
    source_camera: str = "",
    target_camera: str = "",
) -> CalibrationMap:
    """Least-squares map minimising sum ||phi(src_i) @ M - tgt_i||^2.

    Solved with LAPACK gelsy (complete orthogonal factorisation with column
    pivoting); the normal equations are never formed.
    """
    kind = CalibrationKind(kind)
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 4 or src.shape != tgt.shape:
        raise ShapeMismatchError(f"src {src.shape} and tgt {tgt.shape} must both be (N, 4)")
    n_features = MATRIX_SHAPES[kind][0]
    if src.shape[0] < n_features:
        raise InsufficientSamplesError(f"{kind.value} needs >= {n_features} samples, got {src.shape[0]}")

    design = _features(src, kind)
    target = _targets(tgt, kind)
    matrix, _, rank, _ = linalg.lstsq(design, target, lapack_driver="gelsy")
    if rank < n_features:
        raise RankDeficientError(f"{kind.value} design matrix has rank {rank} < {n_features}")

    rms = float(np.sqrt(np.mean((design @ matrix - target) ** 2)))
    logger.info("[CALIB] %s %s->%s on %d samples, residual rms=%.3e",
                kind.value, source_camera or "?", target_camera or "?", src.shape[0], rms)
    return CalibrationMap(kind=kind, matrix=matrix, source_camera=source_camera, target_camera=target_camera)


def map_pixels(cmap: CalibrationMap, pixels) -> np.ndarray:
    """Unclamped (N, 3 or 4) output of the map on (N, 4) pixels."""
    return _features(np.asarray(pixels, dtype=np.float64), cmap.kind) @ cmap.matrix


def calibration_residual(cmap: CalibrationMap, src, tgt) -> float:
    """RMS of phi(src) @ M - tgt in the map's output space."""
    out = map_pixels(cmap, src)
    return float(np.sqrt(np.mean((out - _targets(np.asarray(tgt, dtype=np.float64), cmap.kind)) ** 2)))


def apply_calibration(cmap: CalibrationMap, frame: RawFrame) -> RawFrame:
    out = map_pixels(cmap, frame_pixels(frame))
    if cmap.kind == CalibrationKind.RGB3:
        # transformed green goes to both green planes
        out = out[:, (0, 1, 1, 2)]
    planes = np.clip(out, 0.0, 1.0).T.reshape(4, frame.height, frame.width)
    return frame.replace(channels=planes)


def fit_calibration_frames(
    src_frames: Sequence[RawFrame],
    tgt_frames: Sequence[RawFrame],
    kind: CalibrationKind = CalibrationKind.QUAD14,
) -> CalibrationMap:
    if len(src_frames) != len(tgt_frames) or not src_frames:
        raise ShapeMismatchError(f"need matching non-empty frame lists, got {len(src_frames)} and {len(tgt_frames)}")
    for s, t in zip(src_frames, tgt_frames):
        if s.shape != t.shape:
            raise ShapeMismatchError(f"aligned frames must share a shape, got {s.shape} vs {t.shape}")
    src = np.concatenate([frame_pixels(f) for f in src_frames])
    tgt = np.concatenate([frame_pixels(f) for f in tgt_frames])
    return fit_calibration(
        src, tgt, kind,
        source_camera=src_frames[0].meta.camera_id,
        target_camera=tgt_frames[0].meta.camera_id,
    )


# ---- Persistence ----
def save_map(cmap: CalibrationMap, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cmap.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_map(path: PathLike) -> CalibrationMap:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise FormatError(f"calibration map not found: {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"calibration map {path} is not valid JSON: {e}") from e
    return CalibrationMap.from_dict(payload)
