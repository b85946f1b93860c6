# raw2raw/pairing.py
"""Aligned patch-pair construction between two captures of the same scene.

grayscale -> feature matches -> RANSAC homography -> spatial NMS -> synchronized crops.
All coordinates are plane pixels (half the mosaic resolution), x = column, y = row.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Optional, Protocol, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import ndimage
from sklearn.neighbors import NearestNeighbors

from raw2raw import config
from raw2raw.exceptions import (
    ConfigError,
    CropBoundaryError,
    DegenerateConfigurationError,
    EmptyResultError,
    FormatError,
    InsufficientSamplesError,
    NoConsensusError,
    NoKeypointsError,
    NumericalError,
)
from raw2raw.raw_container import RawFrame

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ---- Types ----
@dataclass(frozen=True)
class Match:
    point_a: tuple[float, float]
    point_b: tuple[float, float]
    score: float = 1.0


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        h = np.array(self.matrix, dtype=np.float64, copy=True).reshape(3, 3)
        if not np.all(np.isfinite(h)) or np.linalg.matrix_rank(h) < 3:
            raise DegenerateConfigurationError("homography matrix is singular")
        if abs(h[2, 2]) > 1e-12:
            h = h / h[2, 2]
        h.setflags(write=False)
        object.__setattr__(self, "matrix", h)

    def project(self, pts) -> np.ndarray:
        return _project(self.matrix, np.asarray(pts, dtype=np.float64))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def to_list(self) -> list[float]:
        return self.matrix.ravel().tolist()


@dataclass(frozen=True)
class PatchPair:
    patch_a: RawFrame
    patch_b: RawFrame
    center_a: tuple[int, int]
    center_b: tuple[int, int]
    shift_applied: tuple[int, int]
    homography: Optional[Homography] = None
    match: Optional[Match] = None


class PairingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    crop_size: int = Field(default=config.CROP_SIZE, ge=1)
    nms_min_dist: float = Field(default=config.NMS_MIN_DIST, ge=0.0)
    ransac_threshold_px: float = Field(default=config.RANSAC_THRESHOLD_PX, gt=0.0)
    ransac_max_iters: int = Field(default=config.RANSAC_MAX_ITERS, ge=1)
    ransac_min_inliers: int = Field(default=config.RANSAC_MIN_INLIERS, ge=4)
    ransac_confidence: float = Field(default=config.RANSAC_CONFIDENCE, gt=0.0, lt=1.0)
    match_ratio: float = Field(default=config.MATCH_RATIO, gt=0.0, le=1.0)
    max_keypoints: int = Field(default=500, ge=1)
    max_pairs: Optional[int] = Field(default=None, ge=1)
    gray_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    seed: int = 0


def make_pairing_config(**fields) -> PairingConfig:
    fields = {k: v for k, v in fields.items() if v is not None}
    try:
        return PairingConfig(**fields)
    except ValidationError as e:
        raise ConfigError(f"invalid pairing config: {e}") from e


# ---- Grayscale ----
def to_grayscale(frame: RawFrame, weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25)) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (4,):
        raise ConfigError(f"grayscale needs 4 weights, got {w.shape}")
    return np.tensordot(w, frame.channels.astype(np.float64), axes=1)


# ---- Matching ----
class Matcher(Protocol):
    def match(self, gray_a: np.ndarray, gray_b: np.ndarray) -> list[Match]:
        ...


class CornerNccMatcher:
    """Structure-tensor corners + normalised cross-correlation descriptors + ratio test."""

    def __init__(
        self,
        max_keypoints: int = 500,
        descriptor_radius: int = 7,
        ratio: float = config.MATCH_RATIO,
        min_ncc: float = 0.5,
        harris_k: float = 0.04,
        sigma: float = 1.5,
        nms_radius: int = 3,
        rel_threshold: float = 0.01,
    ):
        self.max_keypoints = max_keypoints
        self.descriptor_radius = descriptor_radius
        self.ratio = ratio
        self.min_ncc = min_ncc
        self.harris_k = harris_k
        self.sigma = sigma
        self.nms_radius = nms_radius
        self.rel_threshold = rel_threshold

    @property
    def min_size(self) -> int:
        return 2 * self.descriptor_radius + 3

    def detect(self, gray: np.ndarray) -> np.ndarray:
        """(k, 2) array of (row, col) corners, strongest first."""
        gray = np.asarray(gray, dtype=np.float64)
        gx = ndimage.sobel(gray, axis=1, mode="nearest")
        gy = ndimage.sobel(gray, axis=0, mode="nearest")
        sxx = ndimage.gaussian_filter(gx * gx, self.sigma, mode="nearest")
        syy = ndimage.gaussian_filter(gy * gy, self.sigma, mode="nearest")
        sxy = ndimage.gaussian_filter(gx * gy, self.sigma, mode="nearest")
        response = sxx * syy - sxy * sxy - self.harris_k * (sxx + syy) ** 2

        peak = response.max()
        if not peak > 0:
            return np.empty((0, 2), dtype=np.int64)
        local_max = response == ndimage.maximum_filter(response, size=2 * self.nms_radius + 1, mode="nearest")
        keep = local_max & (response > self.rel_threshold * peak)
        m = self.descriptor_radius
        if m > 0:
            keep[:m, :] = False
            keep[-m:, :] = False
            keep[:, :m] = False
            keep[:, -m:] = False

        rows, cols = np.nonzero(keep)
        order = np.lexsort((cols, rows, -response[rows, cols]))[: self.max_keypoints]
        return np.stack([rows[order], cols[order]], axis=1)

    def describe(self, gray: np.ndarray, keypoints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Zero-mean unit-norm patches; returns (descriptors, usable mask)."""
        r = self.descriptor_radius
        windows = sliding_window_view(np.asarray(gray, dtype=np.float64), (2 * r + 1, 2 * r + 1))
        desc = windows[keypoints[:, 0] - r, keypoints[:, 1] - r].reshape(len(keypoints), -1)
        desc = desc - desc.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(desc, axis=1)
        usable = norms > 1e-9
        desc[usable] /= norms[usable, None]
        return desc, usable

    def match(self, gray_a: np.ndarray, gray_b: np.ndarray) -> list[Match]:
        kp_a, kp_b = self.detect(gray_a), self.detect(gray_b)
        if len(kp_a) == 0 or len(kp_b) == 0:
            raise NoKeypointsError(f"no corners found (a={len(kp_a)}, b={len(kp_b)})")
        desc_a, ok_a = self.describe(gray_a, kp_a)
        desc_b, ok_b = self.describe(gray_b, kp_b)
        kp_a, desc_a = kp_a[ok_a], desc_a[ok_a]
        kp_b, desc_b = kp_b[ok_b], desc_b[ok_b]
        if len(kp_a) == 0 or len(kp_b) == 0:
            raise NoKeypointsError("all corners sit on textureless windows")

        k = min(2, len(kp_b))
        nn = NearestNeighbors(n_neighbors=k, algorithm="brute").fit(desc_b)
        dist, idx = nn.kneighbors(desc_a)

        matches = []
        for i in range(len(kp_a)):
            d0 = dist[i, 0]
            if k == 2 and not d0 < self.ratio * dist[i, 1]:
                continue
            # unit vectors: |a - b|^2 = 2 - 2 * ncc
            ncc = 1.0 - 0.5 * d0 * d0
            if ncc < self.min_ncc:
                continue
            ra, ca = kp_a[i]
            rb, cb = kp_b[idx[i, 0]]
            matches.append(Match((float(ca), float(ra)), (float(cb), float(rb)), float(ncc)))
        logger.info("[PAIR] corners a=%d b=%d, %d matches after ratio test", len(kp_a), len(kp_b), len(matches))
        return matches


class FileMatcher:
    """Serves correspondences computed elsewhere (e.g. by a dense neural matcher)."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.matches = load_matches(self.path)

    @property
    def min_size(self) -> int:
        return 1

    def match(self, gray_a: np.ndarray, gray_b: np.ndarray) -> list[Match]:
        return list(self.matches)


def match_features(gray_a: np.ndarray, gray_b: np.ndarray, matcher: Optional[Matcher] = None) -> list[Match]:
    matcher = matcher or CornerNccMatcher()
    min_size = getattr(matcher, "min_size", 1)
    for name, g in (("a", gray_a), ("b", gray_b)):
        if g.ndim != 2 or min(g.shape) < min_size:
            raise FormatError(f"plane {name} {g.shape} is below the matcher minimum of {min_size}px")
    raw = matcher.match(gray_a, gray_b)

    def _inside(p, shape) -> bool:
        return 0.0 <= p[0] <= shape[1] - 1 and 0.0 <= p[1] <= shape[0] - 1

    matches = [m for m in raw if _inside(m.point_a, gray_a.shape) and _inside(m.point_b, gray_b.shape)]
    if len(matches) < len(raw):
        logger.warning("[PAIR] dropped %d matches outside the planes", len(raw) - len(matches))
    return matches


def save_matches(matches: Sequence[Match], path: PathLike) -> Path:
    path = Path(path)
    lines = [f"{m.point_a[0]!r} {m.point_a[1]!r} {m.point_b[0]!r} {m.point_b[1]!r} {m.score!r}" for m in matches]
    path.write_text("".join(line + "\n" for line in lines), encoding="ascii")
    return path


def load_matches(path: PathLike) -> list[Match]:
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except FileNotFoundError as e:
        raise FormatError(f"match file not found: {path}") from e
    matches = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            xa, ya, xb, yb, score = (float(v) for v in parts)
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: expected 'xa ya xb yb score', got {line!r}") from e
        matches.append(Match((xa, ya), (xb, yb), score))
    return matches


# ---- Homography estimation ----
def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform to zero mean and sqrt(2) mean distance."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 1e-12 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.c_[pts, np.ones(len(pts))] @ H.T
    w = ph[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ph[:, :2] / w[:, None]
    out[np.abs(w) < 1e-12] = np.inf
    return out


def symmetric_transfer_error(H: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """sqrt(|H a - b|^2 + |H^-1 b - a|^2) per correspondence."""
    fwd = _project(H, pts_a)
    bwd = _project(np.linalg.inv(H), pts_b)
    err = np.sqrt(((fwd - pts_b) ** 2).sum(axis=1) + ((bwd - pts_a) ** 2).sum(axis=1))
    return np.where(np.isfinite(err), err, np.inf)


def _dlt(a: np.ndarray, b: np.ndarray) -> Optional[np.ndarray]:
    """Homogeneous least-squares solve on already-normalised coordinates."""
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    n = len(a)
    zeros, ones = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.c_[x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u]
    A[1::2] = np.c_[zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v]
    _, s, vt = np.linalg.svd(A)
    # rank < 8 means the sample does not pin down a homography
    if s[7] <= 1e-10 * s[0]:
        return None
    return vt[-1].reshape(3, 3)


def _collinear(pts: np.ndarray, eps: float = 1e-6) -> bool:
    """True if any three of the four points are (nearly) collinear."""
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u, v = pts[j] - pts[i], pts[k] - pts[i]
        if abs(u[0] * v[1] - u[1] * v[0]) < eps:
            return True
    return False


def estimate_homography(pts_a: np.ndarray, pts_b: np.ndarray) -> Optional[np.ndarray]:
    """Normalised DLT on >= 4 correspondences; None when degenerate."""
    na, Ta = _normalize_points(pts_a)
    nb, Tb = _normalize_points(pts_b)
    Hn = _dlt(na, nb)
    if Hn is None:
        return None
    H = np.linalg.inv(Tb) @ Hn @ Ta
    if abs(np.linalg.det(H)) < 1e-15:
        return None
    return H / H[2, 2] if abs(H[2, 2]) > 1e-12 else H


def ransac_homography(
    matches: Sequence[Match],
    threshold_px: float = config.RANSAC_THRESHOLD_PX,
    max_iters: int = config.RANSAC_MAX_ITERS,
    seed: int = 0,
    min_inliers: int = config.RANSAC_MIN_INLIERS,
    confidence: float = config.RANSAC_CONFIDENCE,
) -> tuple[Homography, np.ndarray]:
    """Robust homography from 4-point samples; returns the model and its inlier mask.

    The best-consensus hypothesis is refit on all of its inliers, and the mask
    is recomputed under the returned model, so every flagged inlier satisfies
    the threshold.
    """
    n = len(matches)
    if n < 4:
        raise InsufficientSamplesError(f"RANSAC needs >= 4 matches, got {n}")
    pa = np.array([m.point_a for m in matches], dtype=np.float64)
    pb = np.array([m.point_b for m in matches], dtype=np.float64)
    na, Ta = _normalize_points(pa)
    nb, Tb = _normalize_points(pb)
    Tb_inv = np.linalg.inv(Tb)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))

    best_H, best_mask, best_key = None, None, None
    budget = 1 if n == 4 else max_iters
    it = 0
    while it < budget:
        it += 1
        idx = np.arange(4) if n == 4 else rng.choice(n, size=4, replace=False)
        if _collinear(na[idx]) or _collinear(nb[idx]):
            continue
        Hn = _dlt(na[idx], nb[idx])
        if Hn is None:
            continue
        H = Tb_inv @ Hn @ Ta
        if abs(np.linalg.det(H)) < 1e-15:
            continue
        err = symmetric_transfer_error(H, pa, pb)
        mask = err <= threshold_px
        key = (int(mask.sum()), -float(err[mask].sum()))
        if best_key is None or key > best_key:
            best_H, best_mask, best_key = H, mask, key
            w = key[0] / n
            if w >= 1.0:
                budget = it
            elif w > 0:
                needed = math.log(1.0 - confidence) / math.log(1.0 - w ** 4)
                budget = min(budget, max(it, int(math.ceil(needed))))

    if best_H is None:
        raise DegenerateConfigurationError(f"all {it} RANSAC samples were degenerate (collinear points?)")
    if best_key[0] < min_inliers:
        raise NoConsensusError(f"best model has {best_key[0]} inliers, need {min_inliers}")

    model = best_H
    refit = estimate_homography(pa[best_mask], pb[best_mask])
    if refit is not None:
        refit_mask = symmetric_transfer_error(refit, pa, pb) <= threshold_px
        if refit_mask.sum() >= best_key[0]:
            model = refit
    try:
        homography = Homography(model)
    except DegenerateConfigurationError:
        raise NumericalError("RANSAC produced a singular homography") from None
    inliers = symmetric_transfer_error(homography.matrix, pa, pb) <= threshold_px
    logger.info("[PAIR] RANSAC: %d/%d inliers after %d iterations", int(inliers.sum()), n, it)
    return homography, inliers


# ---- NMS & cropping ----
def spatial_nms(matches: Sequence[Match], min_center_dist: float) -> list[Match]:
    """Greedy by descending score: keep a match iff its point_a is far enough from every kept one."""
    order = sorted(range(len(matches)), key=lambda i: (-matches[i].score, i))
    kept: list[Match] = []
    kept_pts = np.empty((0, 2))
    for i in order:
        p = np.asarray(matches[i].point_a, dtype=np.float64)
        if len(kept_pts) and np.min(np.sqrt(((kept_pts - p) ** 2).sum(axis=1))) < min_center_dist:
            continue
        kept.append(matches[i])
        kept_pts = np.vstack([kept_pts, p])
    return kept


def _shift(start_a: int, start_b: int, extent_a: int, extent_b: int, size: int) -> int:
    """Smallest |s| keeping both windows [start + s, start + s + size) in bounds."""
    lo = max(-start_a, -start_b)
    hi = min(extent_a - size - start_a, extent_b - size - start_b)
    if lo > hi:
        raise CropBoundaryError("no common shift keeps both crop windows inside their frames")
    if lo <= 0 <= hi:
        return 0
    return lo if lo > 0 else hi


def _pixel(v: float) -> int:
    return int(math.floor(v + 0.5))


def synchronized_crop(frame_a: RawFrame, frame_b: RawFrame, match: Match, size: int = config.CROP_SIZE,
                      homography: Optional[Homography] = None) -> PatchPair:
    for name, f in (("a", frame_a), ("b", frame_b)):
        if f.height < size or f.width < size:
            raise ConfigError(f"frame {name} planes {f.width}x{f.height} are smaller than the {size}px crop")
    half = size // 2
    cxa, cya = _pixel(match.point_a[0]), _pixel(match.point_a[1])
    cxb, cyb = _pixel(match.point_b[0]), _pixel(match.point_b[1])
    dx = _shift(cxa - half, cxb - half, frame_a.width, frame_b.width, size)
    dy = _shift(cya - half, cyb - half, frame_a.height, frame_b.height, size)
    xa, ya = cxa - half + dx, cya - half + dy
    xb, yb = cxb - half + dx, cyb - half + dy
    return PatchPair(
        patch_a=frame_a.replace(channels=frame_a.channels[:, ya:ya + size, xa:xa + size]),
        patch_b=frame_b.replace(channels=frame_b.channels[:, yb:yb + size, xb:xb + size]),
        center_a=(cxa + dx, cya + dy),
        center_b=(cxb + dx, cyb + dy),
        shift_applied=(dx, dy),
        homography=homography,
        match=match,
    )


# ---- Pipeline ----
def build_pairs(
    frame_a: RawFrame,
    frame_b: RawFrame,
    cfg: Optional[PairingConfig] = None,
    matcher: Optional[Matcher] = None,
) -> tuple[list[PatchPair], dict]:
    """Run the whole pipeline; an empty result is returned with a manifest warning."""
    cfg = cfg or PairingConfig()
    manifest = {
        "seed": cfg.seed,
        "crop_size": cfg.crop_size,
        "thresholds": {
            "ransac_threshold_px": cfg.ransac_threshold_px,
            "nms_min_dist": cfg.nms_min_dist,
            "match_ratio": cfg.match_ratio,
        },
        "ransac": {
            "max_iters": cfg.ransac_max_iters,
            "min_inliers": cfg.ransac_min_inliers,
            "confidence": cfg.ransac_confidence,
        },
        "cameras": [frame_a.meta.camera_id, frame_b.meta.camera_id],
        "match_count": 0,
        "inlier_count": 0,
        "homography": None,
        "warning": None,
        "pairs": [],
    }
    matcher = matcher or CornerNccMatcher(max_keypoints=cfg.max_keypoints, ratio=cfg.match_ratio)
    gray_a = to_grayscale(frame_a, cfg.gray_weights)
    gray_b = to_grayscale(frame_b, cfg.gray_weights)

    try:
        matches = match_features(gray_a, gray_b, matcher)
        manifest["match_count"] = len(matches)
        homography, inliers = ransac_homography(
            matches,
            threshold_px=cfg.ransac_threshold_px,
            max_iters=cfg.ransac_max_iters,
            seed=cfg.seed,
            min_inliers=cfg.ransac_min_inliers,
            confidence=cfg.ransac_confidence,
        )
    except (EmptyResultError, InsufficientSamplesError, DegenerateConfigurationError) as e:
        logger.warning("[PAIR] no pairs: %s", e)
        manifest["warning"] = f"no pairs: {e}"
        return [], manifest

    manifest["homography"] = homography.to_list()
    manifest["inlier_count"] = int(inliers.sum())
    kept = spatial_nms([m for m, ok in zip(matches, inliers) if ok], cfg.nms_min_dist)

    pairs: list[PatchPair] = []
    skipped = 0
    for m in kept:
        if cfg.max_pairs is not None and len(pairs) >= cfg.max_pairs:
            break
        try:
            pair = synchronized_crop(frame_a, frame_b, m, cfg.crop_size, homography)
        except CropBoundaryError:
            skipped += 1
            continue
        manifest["pairs"].append({
            "index": len(pairs),
            "center_a": list(pair.center_a),
            "center_b": list(pair.center_b),
            "shift": list(pair.shift_applied),
            "match": {"point_a": list(m.point_a), "point_b": list(m.point_b), "score": m.score},
        })
        pairs.append(pair)
    if skipped:
        logger.info("[PAIR] %d matches could not be cropped in sync", skipped)
    if not pairs:
        manifest["warning"] = "no pairs: no retained match admits a synchronized crop"
        logger.warning("[PAIR] %s", manifest["warning"])
    return pairs, manifest


# ---- Manifest ----
_Point = tuple[float, float]
_Pixel = tuple[int, int]


class _Thresholds(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ransac_threshold_px: float
    nms_min_dist: float
    match_ratio: float


class _RansacSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_iters: int
    min_inliers: int
    confidence: float


class _MatchEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    point_a: _Point
    point_b: _Point
    score: float


class _PairEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    index: int = Field(ge=0)
    center_a: _Pixel
    center_b: _Pixel
    shift: _Pixel
    match: _MatchEntry
    files: Optional[tuple[str, str]] = None


class _ManifestFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int
    crop_size: int = Field(ge=1)
    thresholds: _Thresholds
    ransac: _RansacSettings
    cameras: tuple[str, str]
    match_count: int = Field(ge=0)
    inlier_count: int = Field(ge=0)
    homography: Optional[Annotated[list[float], Field(min_length=9, max_length=9)]]
    warning: Optional[str]
    pairs: list[_PairEntry]


def save_manifest(manifest: dict, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path: PathLike) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from e
    try:
        _ManifestFile.model_validate(payload)
    except ValidationError as e:
        raise FormatError(f"manifest {path} failed schema validation: {e}") from e
    return payload
