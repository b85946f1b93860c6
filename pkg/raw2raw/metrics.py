# raw2raw/metrics.py
"""Evaluation metrics on packed 4-plane frames: MAE, PSNR, SSIM and symmetric histogram KL."""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import ndimage
from tabulate import tabulate

from raw2raw import config
from raw2raw.exceptions import FormatError, ShapeMismatchError
from raw2raw.raw_container import CHANNEL_NAMES, RawFrame
from raw2raw.workers import map_ordered

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DATA_RANGE = 1.0


class SsimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    window: int = Field(default=config.SSIM_WINDOW, ge=1)
    sigma: float = Field(default=config.SSIM_SIGMA, gt=0.0)
    k1: float = config.SSIM_K1
    k2: float = config.SSIM_K2
    data_range: float = Field(default=DATA_RANGE, gt=0.0)

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def kernel_1d(self) -> np.ndarray:
        x = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2.0
        g = np.exp(-(x * x) / (2.0 * self.sigma ** 2))
        return g / g.sum()

    def window_2d(self) -> np.ndarray:
        g = self.kernel_1d()
        return np.outer(g, g)


class KlConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    bins: int = Field(default=config.KL_BINS, ge=2)
    epsilon: float = Field(default=config.KL_EPSILON, gt=0.0)


@dataclass
class EvalReport:
    mae: float
    psnr: float
    ssim: float
    kl_sym: float
    per_channel: dict = field(default_factory=dict)  # metric name -> 4 values

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "psnr_db": _encode_float(self.psnr),
            "ssim": self.ssim,
            "kl_sym": self.kl_sym,
            "per_channel": {
                "mae": list(self.per_channel["mae"]),
                "psnr_db": [_encode_float(v) for v in self.per_channel["psnr_db"]],
                "ssim": list(self.per_channel["ssim"]),
                "kl_sym": list(self.per_channel["kl_sym"]),
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        try:
            raw = _ReportFile.model_validate(payload)
        except ValidationError as e:
            raise FormatError(f"evaluation report failed schema validation: {e}") from e
        pc = raw.per_channel
        return cls(
            mae=raw.mae,
            psnr=_decode_float(raw.psnr_db),
            ssim=raw.ssim,
            kl_sym=raw.kl_sym,
            per_channel={
                "mae": list(pc.mae),
                "psnr_db": [_decode_float(v) for v in pc.psnr_db],
                "ssim": list(pc.ssim),
                "kl_sym": list(pc.kl_sym),
            },
        )


# JSON has no infinity; a perfect match is written as "inf"
_Decibels = Union[float, Literal["inf"]]
_PerChannel = Field(min_length=len(CHANNEL_NAMES), max_length=len(CHANNEL_NAMES))


class _PerChannelFile(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    mae: Annotated[list[float], _PerChannel]
    psnr_db: Annotated[list[_Decibels], _PerChannel]
    ssim: Annotated[list[float], _PerChannel]
    kl_sym: Annotated[list[float], _PerChannel]


class _ReportFile(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    mae: float
    psnr_db: _Decibels
    ssim: float
    kl_sym: float
    per_channel: _PerChannelFile


def _encode_float(v: float):
    return "inf" if math.isinf(v) and v > 0 else v


def _decode_float(v) -> float:
    return math.inf if v == "inf" else float(v)


def _pair(pred: RawFrame, ref: RawFrame) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != ref.shape:
        raise ShapeMismatchError(f"frames differ in shape: {pred.shape} vs {ref.shape}")
    return pred.channels.astype(np.float64), ref.channels.astype(np.float64)


# ---- MAE / PSNR ----
def mae(pred: RawFrame, ref: RawFrame) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean(np.abs(p - r)))


def _psnr_from_mse(mse: float) -> float:
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(DATA_RANGE ** 2 / mse))


def psnr(pred: RawFrame, ref: RawFrame) -> float:
    p, r = _pair(pred, ref)
    return _psnr_from_mse(float(np.mean((p - r) ** 2)))


# ---- SSIM ----
def _window_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Gaussian-weighted mean over every window that fits entirely inside x."""
    half = kernel.size // 2
    out = ndimage.correlate1d(x, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:x.shape[0] - (kernel.size - 1 - half), half:x.shape[1] - (kernel.size - 1 - half)]


def ssim_plane(p: np.ndarray, r: np.ndarray, cfg: Optional[SsimConfig] = None) -> float:
    cfg = cfg or SsimConfig()
    if min(p.shape) < cfg.window:
        raise ShapeMismatchError(f"plane {p.shape} is smaller than the {cfg.window}x{cfg.window} SSIM window")
    kernel = cfg.kernel_1d()
    mu_p = _window_mean(p, kernel)
    mu_r = _window_mean(r, kernel)
    sigma_p2 = _window_mean(p * p, kernel) - mu_p ** 2
    sigma_r2 = _window_mean(r * r, kernel) - mu_r ** 2
    sigma_pr = _window_mean(p * r, kernel) - mu_p * mu_r
    num = (2 * mu_p * mu_r + cfg.c1) * (2 * sigma_pr + cfg.c2)
    den = (mu_p ** 2 + mu_r ** 2 + cfg.c1) * (sigma_p2 + sigma_r2 + cfg.c2)
    return float(np.mean(num / den))


def _ssim_channels(p: np.ndarray, r: np.ndarray, cfg: SsimConfig, threads: Optional[int]) -> list[float]:
    return map_ordered(lambda c: ssim_plane(p[c], r[c], cfg), range(p.shape[0]), threads)


def ssim(pred: RawFrame, ref: RawFrame, cfg: Optional[SsimConfig] = None, threads: Optional[int] = None) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean(_ssim_channels(p, r, cfg or SsimConfig(), threads)))


# ---- Symmetric KL ----
def intensity_histogram(plane: np.ndarray, cfg: Optional[KlConfig] = None) -> np.ndarray:
    """Epsilon-regularised distribution over cfg.bins equal bins on [0, 1]."""
    cfg = cfg or KlConfig()
    counts, _ = np.histogram(np.asarray(plane, dtype=np.float64).ravel(), bins=cfg.bins, range=(0.0, 1.0))
    p = counts / max(1, counts.sum()) + cfg.epsilon
    return p / p.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def sym_kl_plane(p_plane: np.ndarray, r_plane: np.ndarray, cfg: Optional[KlConfig] = None) -> float:
    p = intensity_histogram(p_plane, cfg)
    q = intensity_histogram(r_plane, cfg)
    return 0.5 * (kl_divergence(p, q) + kl_divergence(q, p))


def sym_kl(pred: RawFrame, ref: RawFrame, cfg: Optional[KlConfig] = None) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean([sym_kl_plane(p[c], r[c], cfg) for c in range(p.shape[0])]))


# ---- Reports ----
def evaluate_pair(
    pred: RawFrame,
    ref: RawFrame,
    ssim_cfg: Optional[SsimConfig] = None,
    kl_cfg: Optional[KlConfig] = None,
    threads: Optional[int] = None,
) -> EvalReport:
    p, r = _pair(pred, ref)
    ssim_cfg = ssim_cfg or SsimConfig()
    diff = p - r
    per_ssim = _ssim_channels(p, r, ssim_cfg, threads)
    per_kl = [sym_kl_plane(p[c], r[c], kl_cfg) for c in range(4)]
    report = EvalReport(
        mae=mae(pred, ref),
        psnr=psnr(pred, ref),
        ssim=float(np.mean(per_ssim)),
        kl_sym=float(np.mean(per_kl)),
        per_channel={
            "mae": [float(np.mean(np.abs(diff[c]))) for c in range(4)],
            "psnr_db": [_psnr_from_mse(float(np.mean(diff[c] ** 2))) for c in range(4)],
            "ssim": [float(v) for v in per_ssim],
            "kl_sym": [float(v) for v in per_kl],
        },
    )
    logger.info("[METRICS] mae=%.5f psnr=%.3f ssim=%.4f kl=%.5f", report.mae, report.psnr, report.ssim, report.kl_sym)
    return report


def evaluate_many(
    pairs: Sequence[tuple[RawFrame, RawFrame]],
    ssim_cfg: Optional[SsimConfig] = None,
    kl_cfg: Optional[KlConfig] = None,
    threads: Optional[int] = None,
) -> tuple[EvalReport, list[EvalReport]]:
    """Mean report over (pred, ref) pairs, plus the per-pair reports."""
    if not pairs:
        raise FormatError("evaluate_many needs at least one pair")
    reports = [evaluate_pair(p, r, ssim_cfg, kl_cfg, threads) for p, r in pairs]

    def _mean(values) -> float:
        return float(np.mean(values))

    mean = EvalReport(
        mae=_mean([x.mae for x in reports]),
        psnr=_mean([x.psnr for x in reports]),
        ssim=_mean([x.ssim for x in reports]),
        kl_sym=_mean([x.kl_sym for x in reports]),
        per_channel={
            key: [_mean([x.per_channel[key][c] for x in reports]) for c in range(4)]
            for key in ("mae", "psnr_db", "ssim", "kl_sym")
        },
    )
    return mean, reports


def render_report(report: EvalReport) -> str:
    rows = [
        ["all", report.mae, report.psnr, report.ssim, report.kl_sym],
    ] + [
        [name, report.per_channel["mae"][c], report.per_channel["psnr_db"][c],
         report.per_channel["ssim"][c], report.per_channel["kl_sym"][c]]
        for c, name in enumerate(CHANNEL_NAMES)
    ]
    return tabulate(rows, headers=["channel", "MAE", "PSNR (dB)", "SSIM", "KL"], floatfmt=".6g")


def save_report(report: EvalReport, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_report(path: PathLike) -> EvalReport:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read report {path}: {e}") from e
    return EvalReport.from_dict(payload)
