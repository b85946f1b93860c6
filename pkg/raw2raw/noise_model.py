# raw2raw/noise_model.py
"""Sensor noise profiling under the Poisson-Gaussian model Var(x) = alpha*z + beta.

Flat (low-texture) patches are picked with a Sobel gradient threshold, each
patch contributes a (mean, robust variance) sample, and the samples are
averaged into fixed-width intensity bins per channel. Two such tables are
compared with a masked mean absolute difference.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy import ndimage

from raw2raw import config
from raw2raw.exceptions import (
    ConfigError,
    FormatError,
    InsufficientSamplesError,
    NoFlatPatchesError,
    RankDeficientError,
)
from raw2raw.raw_container import RawFrame
from raw2raw.workers import map_ordered

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
NUM_CHANNELS = 4


class NoiseProfileConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    patch_size: int = Field(default=config.NOISE_PATCH_SIZE, ge=2)
    gradient_percentile: float = Field(default=config.NOISE_GRADIENT_PERCENTILE, gt=0.0, le=1.0)
    num_bins: int = Field(default=config.NOISE_NUM_BINS, ge=1)
    bin_range: tuple[float, float] = (0.0, 1.0)
    min_bin_count: int = Field(default=config.NOISE_MIN_BIN_COUNT, ge=1)
    # Plane the flatness gradient is read from: "others" averages the three
    # remaining CFA planes so the pick does not see the channel's own noise.
    gradient_source: Literal["others", "own"] = config.NOISE_GRADIENT_SOURCE

    @model_validator(mode="after")
    def _range(self):
        lo, hi = self.bin_range
        if not lo < hi:
            raise ValueError(f"bin_range must be increasing, got {list(self.bin_range)}")
        return self

    def bin_centers(self) -> np.ndarray:
        lo, hi = self.bin_range
        width = (hi - lo) / self.num_bins
        return lo + (np.arange(self.num_bins) + 0.5) * width


def make_noise_config(**fields) -> NoiseProfileConfig:
    fields = {k: v for k, v in fields.items() if v is not None}
    try:
        return NoiseProfileConfig(**fields)
    except ValidationError as e:
        raise ConfigError(f"invalid noise profile config: {e}") from e


@dataclass(frozen=True)
class NoiseProfile:
    mean_variance: np.ndarray  # (C, B) average patch variance per bin
    counts: np.ndarray  # (C, B) retained patches per bin
    config: NoiseProfileConfig
    camera_id: str = ""
    mean_intensity: Optional[np.ndarray] = None  # (C, B) average patch mean per bin

    def __post_init__(self):
        mv = np.array(self.mean_variance, dtype=np.float64, copy=True)
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if mv.shape != counts.shape or mv.ndim != 2:
            raise FormatError(f"mean_variance {mv.shape} and counts {counts.shape} must be matching (C, B) grids")
        if mv.shape[1] != self.config.num_bins:
            raise FormatError(f"profile has {mv.shape[1]} bins, config says {self.config.num_bins}")
        if np.any(counts < 0):
            raise FormatError("bin counts must be nonnegative")
        mv.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "mean_variance", mv)
        object.__setattr__(self, "counts", counts)
        if self.mean_intensity is not None:
            mi = np.array(self.mean_intensity, dtype=np.float64, copy=True)
            if mi.shape != mv.shape:
                raise FormatError(f"mean_intensity {mi.shape} does not match mean_variance {mv.shape}")
            mi.setflags(write=False)
            object.__setattr__(self, "mean_intensity", mi)

    @property
    def channels(self) -> int:
        return self.mean_variance.shape[0]

    @property
    def bins(self) -> int:
        return self.mean_variance.shape[1]

    def valid_mask(self, min_bin_count: Optional[int] = None) -> np.ndarray:
        threshold = self.config.min_bin_count if min_bin_count is None else min_bin_count
        return (self.counts >= max(1, threshold))


@dataclass(frozen=True)
class PoissonGaussianParams:
    alpha: np.ndarray  # (4,) shot-noise slope
    beta: np.ndarray  # (4,) read-noise floor

    def __post_init__(self):
        alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (NUM_CHANNELS,)).copy()
        beta = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), (NUM_CHANNELS,)).copy()
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "PoissonGaussianParams":
        try:
            raw = _ParamsFile.model_validate(payload)
        except ValidationError as e:
            raise FormatError(f"Poisson-Gaussian parameters failed schema validation: {e}") from e
        return cls(alpha=raw.alpha, beta=raw.beta)


def predicted_variance(params: PoissonGaussianParams, z) -> np.ndarray:
    """Var(x) = alpha*z + beta, broadcast per channel over the trailing axis of z."""
    z = np.asarray(z, dtype=np.float64)
    return params.alpha[:, None] * z[None, :] + params.beta[:, None]


# ---- Gradients & patches ----
def sobel_gradient_magnitude(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 3 or plane.shape[1] < 3:
        raise FormatError(f"Sobel needs a plane of at least 3x3, got {plane.shape}")
    gx = ndimage.sobel(plane, axis=1, mode="nearest")
    gy = ndimage.sobel(plane, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def _tiles(plane: np.ndarray, patch_size: int) -> np.ndarray:
    """(ny, nx, patch_size, patch_size) view of the non-overlapping patches; ragged edges are dropped."""
    ny, nx = plane.shape[0] // patch_size, plane.shape[1] // patch_size
    cropped = plane[:ny * patch_size, :nx * patch_size]
    return cropped.reshape(ny, patch_size, nx, patch_size).transpose(0, 2, 1, 3)


def _check_patchable(frame: RawFrame, cfg: NoiseProfileConfig) -> None:
    if frame.height < cfg.patch_size or frame.width < cfg.patch_size:
        raise FormatError(
            f"frame planes {frame.width}x{frame.height} are smaller than one {cfg.patch_size}px patch"
        )


def _flat_mask(plane: np.ndarray, cfg: NoiseProfileConfig) -> np.ndarray:
    grads = _tiles(sobel_gradient_magnitude(plane), cfg.patch_size).mean(axis=(-2, -1))
    threshold = np.quantile(grads, cfg.gradient_percentile)
    return grads <= threshold


def _gradient_guides(frame: RawFrame, cfg: NoiseProfileConfig) -> list[np.ndarray]:
    """Per channel, the plane whose Sobel response decides which patches are flat."""
    planes = frame.channels.astype(np.float64)
    if cfg.gradient_source == "own":
        return list(planes)
    # the CFA planes sample one scene, so the other three carry the same structure
    # with noise independent of the channel being measured
    return [np.delete(planes, c, axis=0).mean(axis=0) for c in range(planes.shape[0])]


def select_flat_patches(frame: RawFrame, cfg: Optional[NoiseProfileConfig] = None) -> list[np.ndarray]:
    """Per channel, (k, 2) array of (row, col) origins of the retained flat patches."""
    cfg = cfg or NoiseProfileConfig()
    _check_patchable(frame, cfg)
    out = []
    for guide in _gradient_guides(frame, cfg):
        rows, cols = np.nonzero(_flat_mask(guide, cfg))
        out.append(np.stack([rows, cols], axis=1) * cfg.patch_size)
    return out


def _axis_slope(profile: np.ndarray) -> np.ndarray:
    """Least-squares slope along the last axis against centred positions.

    Mirrored samples are differenced first, so a flat profile gives exactly 0.
    """
    n = profile.shape[-1]
    half = n // 2
    offsets = np.arange(n - half, n) - (n - 1) / 2.0
    diffs = profile[..., n - half:] - profile[..., half - 1::-1]
    return diffs @ offsets / (2.0 * np.sum(offsets ** 2))


def _detrend(tiles: np.ndarray) -> np.ndarray:
    """Remove the least-squares plane of each (..., h, w) tile, keeping its offset."""
    h, w = tiles.shape[-2:]
    sx = _axis_slope(tiles.mean(axis=-2))[..., None, None]
    sy = _axis_slope(tiles.mean(axis=-1))[..., None, None]
    x = np.arange(w) - (w - 1) / 2.0
    y = (np.arange(h) - (h - 1) / 2.0)[:, None]
    return tiles - sx * x - sy * y


def _tile_stats(tiles: np.ndarray, detrend: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Mean and MAD variance of each (..., h, w) tile."""
    n = tiles.shape[-2] * tiles.shape[-1]
    flat = tiles.reshape(*tiles.shape[:-2], n)
    means = flat.mean(axis=-1)
    if detrend:
        flat = _detrend(tiles).reshape(flat.shape)
    med = np.median(flat, axis=-1)
    mad = np.median(np.abs(flat - med[..., None]), axis=-1)
    variances = (config.MAD_TO_SIGMA * mad) ** 2
    if detrend:
        variances = variances * (n / (n - 3))  # three plane coefficients were fitted
    return means, variances


def patch_stats(patch, detrend: bool = False) -> tuple[float, float]:
    """Arithmetic mean and MAD-based variance (1.4826 * MAD)^2.

    With detrend=True the 2-D patch loses its least-squares plane before the
    MAD, so a smooth shading gradient is not counted as noise.
    """
    x = np.asarray(patch, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("patch_stats needs a nonempty patch")
    if not detrend:
        x = x.ravel()
        med = np.median(x)
        mad = np.median(np.abs(x - med))
        return float(x.mean()), float((config.MAD_TO_SIGMA * mad) ** 2)
    if x.ndim != 2 or min(x.shape) < 2:
        raise ConfigError(f"detrending needs a 2-D patch of at least 2x2, got {x.shape}")
    means, variances = _tile_stats(x[None], detrend=True)
    return float(means[0]), float(variances[0])


def bin_index(mu: np.ndarray, cfg: NoiseProfileConfig) -> np.ndarray:
    """floor((mu - lo) / width); the closed upper edge maps into the last bin."""
    lo, hi = cfg.bin_range
    idx = np.floor((np.asarray(mu, dtype=np.float64) - lo) / (hi - lo) * cfg.num_bins).astype(np.int64)
    return np.clip(idx, 0, cfg.num_bins - 1)


# ---- Profiles ----
def _channel_bins(plane: np.ndarray, guide: np.ndarray, cfg: NoiseProfileConfig):
    plane = np.asarray(plane, dtype=np.float64)
    mask = _flat_mask(guide, cfg)
    means, variances = _tile_stats(_tiles(plane, cfg.patch_size)[mask], detrend=True)
    idx = bin_index(means, cfg)
    variance_sums = np.bincount(idx, weights=variances, minlength=cfg.num_bins)
    intensity_sums = np.bincount(idx, weights=means, minlength=cfg.num_bins)
    counts = np.bincount(idx, minlength=cfg.num_bins)
    return variance_sums, intensity_sums, counts


def accumulate_noise_bins(
    frame: RawFrame,
    cfg: Optional[NoiseProfileConfig] = None,
    threads: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-bin variance sums, patch-mean sums and patch counts, each (4, B)."""
    cfg = cfg or NoiseProfileConfig()
    _check_patchable(frame, cfg)
    jobs = list(zip(frame.channels, _gradient_guides(frame, cfg)))
    per_channel = map_ordered(lambda job: _channel_bins(job[0], job[1], cfg), jobs, threads)
    variance_sums = np.stack([v for v, _, _ in per_channel])
    intensity_sums = np.stack([m for _, m, _ in per_channel])
    counts = np.stack([c for _, _, c in per_channel]).astype(np.int64)
    return variance_sums, intensity_sums, counts


def _profile_from_sums(
    variance_sums: np.ndarray,
    intensity_sums: np.ndarray,
    counts: np.ndarray,
    cfg: NoiseProfileConfig,
    camera_id: str,
) -> NoiseProfile:
    empty = counts.sum(axis=1) == 0
    if np.any(empty):
        raise NoFlatPatchesError(f"no flat patches retained in channel(s) {np.nonzero(empty)[0].tolist()}")
    mean_variance = np.zeros_like(variance_sums, dtype=np.float64)
    np.divide(variance_sums, counts, out=mean_variance, where=counts > 0)
    mean_intensity = np.zeros_like(intensity_sums, dtype=np.float64)
    np.divide(intensity_sums, counts, out=mean_intensity, where=counts > 0)
    return NoiseProfile(
        mean_variance=mean_variance,
        counts=counts,
        config=cfg,
        camera_id=camera_id,
        mean_intensity=mean_intensity,
    )


def build_noise_profile(
    frame: RawFrame,
    cfg: Optional[NoiseProfileConfig] = None,
    threads: Optional[int] = None,
) -> NoiseProfile:
    cfg = cfg or NoiseProfileConfig()
    variance_sums, intensity_sums, counts = accumulate_noise_bins(frame, cfg, threads)
    profile = _profile_from_sums(variance_sums, intensity_sums, counts, cfg, frame.meta.camera_id)
    logger.info("[NOISE] camera=%s retained=%s populated_bins=%s", profile.camera_id,
                counts.sum(axis=1).tolist(), (counts > 0).sum(axis=1).tolist())
    return profile


def build_noise_profile_multi(
    frames: Sequence[RawFrame],
    cfg: Optional[NoiseProfileConfig] = None,
    threads: Optional[int] = None,
) -> NoiseProfile:
    """Pool several captures: bin sums and counts are merged before averaging."""
    if not frames:
        raise ConfigError("at least one frame is required to build a profile")
    cfg = cfg or NoiseProfileConfig()
    variance_sums = np.zeros((NUM_CHANNELS, cfg.num_bins), dtype=np.float64)
    intensity_sums = np.zeros((NUM_CHANNELS, cfg.num_bins), dtype=np.float64)
    counts = np.zeros((NUM_CHANNELS, cfg.num_bins), dtype=np.int64)
    for frame in frames:
        v, m, c = accumulate_noise_bins(frame, cfg, threads)
        variance_sums += v
        intensity_sums += m
        counts += c
    camera_ids = {f.meta.camera_id for f in frames}
    if len(camera_ids) > 1:
        logger.warning("[NOISE] pooling frames from several cameras: %r", sorted(camera_ids))
    return _profile_from_sums(variance_sums, intensity_sums, counts, cfg, frames[0].meta.camera_id)


def noise_distance(
    h_fake: NoiseProfile,
    h_real: NoiseProfile,
    normalization: Literal["bins", "valid"] = "bins",
    min_bin_count: Optional[int] = None,
) -> float:
    """Masked mean absolute difference of two noise histograms.

    Only bins populated (>= min_bin_count) in both profiles count. "bins"
    divides by B*C; "valid" divides by the number of jointly valid bins.
    """
    if h_fake.mean_variance.shape != h_real.mean_variance.shape:
        raise ConfigError(f"profile shapes differ: {h_fake.mean_variance.shape} vs {h_real.mean_variance.shape}")
    if tuple(h_fake.config.bin_range) != tuple(h_real.config.bin_range):
        raise ConfigError(f"bin ranges differ: {h_fake.config.bin_range} vs {h_real.config.bin_range}")
    if normalization not in ("bins", "valid"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    if min_bin_count is None:
        min_bin_count = max(h_fake.config.min_bin_count, h_real.config.min_bin_count)

    valid = h_fake.valid_mask(min_bin_count) & h_real.valid_mask(min_bin_count)
    diff = np.abs(h_fake.mean_variance - h_real.mean_variance)
    total = float(np.sum(np.where(valid, diff, 0.0)))
    if normalization == "valid":
        n = int(valid.sum())
        return total / n if n else 0.0
    return total / (h_fake.bins * h_fake.channels)


# ---- Poisson-Gaussian model ----
def fit_poisson_gaussian(profile: NoiseProfile) -> PoissonGaussianParams:
    """Count-weighted least-squares line through (bin intensity, mean variance), per channel.

    A bin's intensity is the average mean of its patches when the profile
    carries it, otherwise the bin center.
    """
    centers = profile.config.bin_centers()
    valid = profile.valid_mask()
    alpha = np.zeros(profile.channels)
    beta = np.zeros(profile.channels)
    for c in range(profile.channels):
        sel = valid[c]
        if sel.sum() < 2:
            raise InsufficientSamplesError(f"channel {c}: need >= 2 valid bins, have {int(sel.sum())}")
        z = centers[sel] if profile.mean_intensity is None else profile.mean_intensity[c, sel]
        if np.unique(z).size < 2:
            raise RankDeficientError(f"channel {c}: all valid bins share one intensity")
        w = np.sqrt(profile.counts[c, sel].astype(np.float64))
        design = np.stack([z, np.ones_like(z)], axis=1) * w[:, None]
        target = profile.mean_variance[c, sel] * w
        (slope, intercept), *_ = np.linalg.lstsq(design, target, rcond=None)
        alpha[c] = max(float(slope), 0.0)
        beta[c] = max(float(intercept), 0.0)
    logger.info("[NOISE] fit alpha=%s beta=%s", alpha.tolist(), beta.tolist())
    return PoissonGaussianParams(alpha=alpha, beta=beta)


def synthesize_noise(
    clean: RawFrame,
    params: PoissonGaussianParams,
    seed: int = 0,
    threads: Optional[int] = None,
) -> RawFrame:
    """Draw x = alpha*Poisson(z/alpha) + N(0, beta) per pixel (x = z + N(0, beta) when alpha == 0).

    Each channel owns a Philox stream spawned from `seed`, so the output does
    not depend on how channels are scheduled.
    """
    if np.any(params.alpha < 0) or np.any(params.beta < 0):
        raise ConfigError(f"noise parameters must be nonnegative, got {params.to_dict()}")
    streams = np.random.SeedSequence(int(seed)).spawn(NUM_CHANNELS)

    def _channel(c: int) -> np.ndarray:
        z = clean.channels[c].astype(np.float64)
        alpha, beta = float(params.alpha[c]), float(params.beta[c])
        if alpha == 0.0 and beta == 0.0:
            return z
        rng = np.random.Generator(np.random.Philox(streams[c]))
        x = alpha * rng.poisson(z / alpha) if alpha > 0 else z.copy()
        if beta > 0:
            x = x + rng.normal(0.0, np.sqrt(beta), size=z.shape)
        return np.clip(x, 0.0, 1.0)

    planes = map_ordered(_channel, range(NUM_CHANNELS), threads)
    return clean.replace(channels=np.stack(planes))


# ---- Persistence ----
class _ProfileFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    camera_id: str
    channels: int
    bins: int
    bin_range: tuple[float, float]
    patch_size: int
    gradient_percentile: float
    min_bin_count: int
    gradient_source: Literal["others", "own"] = config.NOISE_GRADIENT_SOURCE
    mean_variance: list[list[float]]
    counts: list[list[int]]
    mean_intensity: Optional[list[list[float]]] = None


class _ParamsFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: list[float] = Field(min_length=NUM_CHANNELS, max_length=NUM_CHANNELS)
    beta: list[float] = Field(min_length=NUM_CHANNELS, max_length=NUM_CHANNELS)


def profile_to_dict(profile: NoiseProfile) -> dict:
    cfg = profile.config
    payload = {
        "camera_id": profile.camera_id,
        "channels": profile.channels,
        "bins": profile.bins,
        "bin_range": list(cfg.bin_range),
        "patch_size": cfg.patch_size,
        "gradient_percentile": cfg.gradient_percentile,
        "min_bin_count": cfg.min_bin_count,
        "gradient_source": cfg.gradient_source,
        "mean_variance": profile.mean_variance.tolist(),
        "counts": profile.counts.tolist(),
    }
    if profile.mean_intensity is not None:
        payload["mean_intensity"] = profile.mean_intensity.tolist()
    return payload


def _check_grid(name: str, grid: list, channels: int, bins: int) -> None:
    if len(grid) != channels or any(len(row) != bins for row in grid):
        raise FormatError(f"{name} does not match the declared channels x bins")


def profile_from_dict(payload: dict) -> NoiseProfile:
    try:
        raw = _ProfileFile.model_validate(payload)
    except ValidationError as e:
        raise FormatError(f"noise profile failed schema validation: {e}") from e
    _check_grid("mean_variance", raw.mean_variance, raw.channels, raw.bins)
    _check_grid("counts", raw.counts, raw.channels, raw.bins)
    if raw.mean_intensity is not None:
        _check_grid("mean_intensity", raw.mean_intensity, raw.channels, raw.bins)
    try:
        cfg = NoiseProfileConfig(
            patch_size=raw.patch_size,
            gradient_percentile=raw.gradient_percentile,
            num_bins=raw.bins,
            bin_range=raw.bin_range,
            min_bin_count=raw.min_bin_count,
            gradient_source=raw.gradient_source,
        )
    except ValidationError as e:
        raise FormatError(f"noise profile carries an invalid config: {e}") from e
    return NoiseProfile(
        mean_variance=raw.mean_variance,
        counts=raw.counts,
        config=cfg,
        camera_id=raw.camera_id,
        mean_intensity=raw.mean_intensity,
    )


def save_profile(profile: NoiseProfile, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(profile_to_dict(profile), indent=2) + "\n", encoding="utf-8")
    return path


def load_profile(path: PathLike) -> NoiseProfile:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise FormatError(f"profile not found: {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"profile {path} is not valid JSON: {e}") from e
    return profile_from_dict(payload)


def save_params(params: PoissonGaussianParams, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(params.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_params(path: PathLike) -> PoissonGaussianParams:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read parameters from {path}: {e}") from e
    return PoissonGaussianParams.from_dict(payload)
