# raw2raw/cli.py
"""Command-line entry point: `python -m raw2raw <subcommand>`.

Every subcommand wraps one library operation and reads/writes the module
file formats. Exit codes: 0 ok, 2 input format, 3 metadata/config,
4 empty result, 5 numerical failure.
"""
import functools
import json
import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tabulate import tabulate

from raw2raw import calibration, config, metrics, noise_model, pairing, raw_container
from raw2raw.exceptions import ConfigError, Raw2RawError
from raw2raw.raw_container import CHANNEL_NAMES

logger = logging.getLogger(__name__)


class CliConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = Field(default=0)
    threads: int = Field(default=0, ge=0)  # 0 = auto
    output: Optional[Path] = None
    format: str = "json"


def _emit(cfg: CliConfig, payload: dict, text: Optional[str] = None) -> None:
    if cfg.format == "text" and text is not None:
        rendered = text
    else:
        rendered = json.dumps(payload, indent=2, sort_keys=True)
    if cfg.output:
        Path(cfg.output).write_text(rendered + "\n", encoding="utf-8")
    else:
        click.echo(rendered)


def _command(fn):
    """Map library errors onto exit codes (JSON error body on --format json)."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return fn(*args, **kwargs)
        except Raw2RawError as e:
            cfg: CliConfig = ctx.obj
            logger.debug("[CLI] %s failed", ctx.info_name, exc_info=True)
            if cfg is not None and cfg.format == "json":
                click.echo(json.dumps({"ok": False, "error": str(e), "exit_code": e.exit_code,
                                       "type": type(e).__name__}, sort_keys=True))
            else:
                click.echo(f"error: {e}", err=True)
            ctx.exit(e.exit_code)
    return wrapper


def _threads(cfg: CliConfig) -> int:
    return cfg.threads


def _resolution(value: Optional[str]) -> Optional[tuple[int, int]]:
    if not value:
        return None
    try:
        h, w = (int(v) for v in value.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--resolution must look like HxW, got {value!r}") from None
    return h, w


# ---- Group ----
@click.group()
@click.option("--seed", type=int, default=None, help="Seed for every stochastic step (default RAW2RAW_SEED or 0).")
@click.option("--threads", type=int, default=None, help="Worker threads, 0 = auto (default RAW2RAW_THREADS).")
@click.option("--output", type=click.Path(dir_okay=False), default=None, help="Write the result here instead of stdout.")
@click.option("--format", "fmt", type=click.Choice(["json", "text"]), default="json", show_default=True)
@click.option("-v", "--verbose", count=True, help="-v info, -vv debug.")
@click.pass_context
def main(ctx, seed, threads, output, fmt, verbose):
    """RAW-to-RAW toolkit: ingestion, noise profiles, calibration, metrics and pair mining."""
    level = {0: config.RAW2RAW_LOG_LEVEL, 1: "INFO"}.get(verbose, "DEBUG")
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=click.get_text_stream("stderr"),
        force=True,
    )
    ctx.obj = CliConfig(
        seed=config.RAW2RAW_SEED if seed is None else seed,
        threads=config.RAW2RAW_THREADS if threads is None else max(0, threads),
        output=output,
        format=fmt,
    )


# ---- raw_container ----
@main.command("ingest")
@click.option("--mosaic", required=True, type=click.Path(dir_okay=False), help="16-bit binary PGM mosaic.")
@click.option("--meta", required=True, type=click.Path(dir_okay=False), help="Metadata sidecar JSON.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Destination .rgg4.")
@click.option("--resolution", default=None, help="Optional HxW plane size (center-crop + box downsample).")
@click.pass_obj
@_command
def ingest_cmd(cfg: CliConfig, mosaic, meta, out, resolution):
    frame = raw_container.orient(raw_container.ingest_pgm(mosaic, meta))
    size = _resolution(resolution)
    if size:
        frame = raw_container.fit_resolution(frame, *size)
    raw_container.write_frame(frame, out)
    _emit(cfg, {"ok": True, "out": str(out), "camera_id": frame.meta.camera_id,
                "plane_width": frame.width, "plane_height": frame.height},
          f"wrote {out} ({frame.width}x{frame.height} planes)")


@main.command("select-ref")
@click.option("--query", required=True, type=click.Path(dir_okay=False))
@click.option("--candidates", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.pass_obj
@_command
def select_ref_cmd(cfg: CliConfig, query, candidates):
    q = raw_container.read_frame(query)
    frames = [raw_container.read_frame(c) for c in candidates]
    index = raw_container.select_reference(q, frames)
    qv = raw_container.channel_mean_vector(q)
    distance = float(((raw_container.channel_mean_vector(frames[index]) - qv) ** 2).sum() ** 0.5)
    _emit(cfg, {"index": index, "path": str(candidates[index]), "distance": distance},
          f"{index}\t{candidates[index]}\t{distance:.6g}")


# ---- noise_model ----
@main.command("profile")
@click.option("--in", "inputs", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--patch-size", type=int, default=None)
@click.option("--percentile", type=float, default=None, help="Gradient percentile in (0, 1].")
@click.option("--bins", type=int, default=None)
@click.option("--min-bin-count", type=int, default=None)
@click.option("--gradient-source", type=click.Choice(["others", "own"]), default=None,
              help="Plane the flatness gradient is read from (default others).")
@click.pass_obj
@_command
def profile_cmd(cfg: CliConfig, inputs, out, patch_size, percentile, bins, min_bin_count, gradient_source):
    ncfg = noise_model.make_noise_config(
        patch_size=patch_size, gradient_percentile=percentile, num_bins=bins, min_bin_count=min_bin_count,
        gradient_source=gradient_source,
    )
    frames = [raw_container.read_frame(p) for p in inputs]
    profile = noise_model.build_noise_profile_multi(frames, ncfg, threads=_threads(cfg))
    noise_model.save_profile(profile, out)
    retained = profile.counts.sum(axis=1).tolist()
    _emit(cfg, {"ok": True, "out": str(out), "frames": len(frames), "retained_patches": retained,
                "populated_bins": (profile.counts > 0).sum(axis=1).tolist()},
          f"wrote {out} from {len(frames)} frame(s), retained patches per channel {retained}")


@main.command("noise-distance")
@click.option("--fake", required=True, type=click.Path(dir_okay=False))
@click.option("--real", required=True, type=click.Path(dir_okay=False))
@click.option("--normalization", type=click.Choice(["bins", "valid"]), default="bins", show_default=True)
@click.pass_obj
@_command
def noise_distance_cmd(cfg: CliConfig, fake, real, normalization):
    d = noise_model.noise_distance(noise_model.load_profile(fake), noise_model.load_profile(real), normalization)
    _emit(cfg, {"noise_distance": d, "normalization": normalization}, f"{d:.10g}")


@main.command("fit-pg")
@click.option("--profile", "profile_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Also save the parameters JSON.")
@click.pass_obj
@_command
def fit_pg_cmd(cfg: CliConfig, profile_path, out):
    params = noise_model.fit_poisson_gaussian(noise_model.load_profile(profile_path))
    if out:
        noise_model.save_params(params, out)
    rows = [[name, f"{a:.6g}", f"{b:.6g}"] for name, a, b in zip(CHANNEL_NAMES, params.alpha, params.beta)]
    _emit(cfg, params.to_dict(), tabulate(rows, headers=["channel", "alpha", "beta"]))


@main.command("synth-noise")
@click.option("--in", "src", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--params", "params_path", default=None, type=click.Path(dir_okay=False))
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.pass_obj
@_command
def synth_noise_cmd(cfg: CliConfig, src, out, params_path, alpha, beta):
    if params_path:
        params = noise_model.load_params(params_path)
    elif alpha is not None and beta is not None:
        params = noise_model.PoissonGaussianParams(alpha=alpha, beta=beta)
    else:
        raise ConfigError("give either --params or both --alpha and --beta")
    noisy = noise_model.synthesize_noise(raw_container.read_frame(src), params, seed=cfg.seed, threads=_threads(cfg))
    raw_container.write_frame(noisy, out)
    _emit(cfg, {"ok": True, "out": str(out), "seed": cfg.seed, **params.to_dict()}, f"wrote {out}")


# ---- calibration ----
@main.command("calibrate")
@click.option("--src", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.option("--tgt", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.option("--kind", type=click.Choice([k.value for k in calibration.CalibrationKind]), default="quad14",
              show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
@_command
def calibrate_cmd(cfg: CliConfig, src, tgt, kind, out):
    src_frames = [raw_container.read_frame(p) for p in src]
    tgt_frames = [raw_container.read_frame(p) for p in tgt]
    cmap = calibration.fit_calibration_frames(src_frames, tgt_frames, kind)
    calibration.save_map(cmap, out)
    rms = calibration.calibration_residual(
        cmap,
        np.concatenate([calibration.frame_pixels(f) for f in src_frames]),
        np.concatenate([calibration.frame_pixels(f) for f in tgt_frames]),
    )
    _emit(cfg, {"ok": True, "out": str(out), "kind": cmap.kind.value, "residual_rms": rms},
          f"wrote {out} ({cmap.kind.value}, residual rms {rms:.4g})")


@main.command("apply")
@click.option("--map", "map_path", required=True, type=click.Path(dir_okay=False))
@click.option("--in", "src", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
@_command
def apply_cmd(cfg: CliConfig, map_path, src, out):
    cmap = calibration.load_map(map_path)
    frame = calibration.apply_calibration(cmap, raw_container.read_frame(src))
    raw_container.write_frame(frame, out)
    _emit(cfg, {"ok": True, "out": str(out), "kind": cmap.kind.value}, f"wrote {out}")


# ---- metrics ----
@main.command("eval")
@click.option("--pred", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.option("--ref", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.pass_obj
@_command
def eval_cmd(cfg: CliConfig, pred, ref):
    if len(pred) != len(ref):
        raise ConfigError(f"--pred and --ref must pair up, got {len(pred)} and {len(ref)}")
    pairs = [(raw_container.read_frame(p), raw_container.read_frame(r)) for p, r in zip(pred, ref)]
    if len(pairs) == 1:
        report = metrics.evaluate_pair(*pairs[0], threads=_threads(cfg))
        _emit(cfg, report.to_dict(), metrics.render_report(report))
        return
    mean, reports = metrics.evaluate_many(pairs, threads=_threads(cfg))
    _emit(cfg, {"mean": mean.to_dict(), "pairs": [r.to_dict() for r in reports]},
          metrics.render_report(mean))


# ---- pairing ----
@main.command("pair")
@click.option("--a", "path_a", required=True, type=click.Path(dir_okay=False))
@click.option("--b", "path_b", required=True, type=click.Path(dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--matches", "matches_path", default=None, type=click.Path(dir_okay=False),
              help="Use precomputed 'xa ya xb yb score' matches instead of the corner matcher.")
@click.option("--crop-size", type=int, default=None)
@click.option("--nms-dist", type=float, default=None)
@click.option("--threshold", type=float, default=None, help="RANSAC symmetric transfer error threshold (px).")
@click.option("--max-iters", type=int, default=None)
@click.option("--min-inliers", type=int, default=None)
@click.option("--max-pairs", type=int, default=None)
@click.pass_obj
@_command
def pair_cmd(cfg: CliConfig, path_a, path_b, out_dir, matches_path, crop_size, nms_dist, threshold,
             max_iters, min_inliers, max_pairs):
    pcfg = pairing.make_pairing_config(
        crop_size=crop_size, nms_min_dist=nms_dist, ransac_threshold_px=threshold,
        ransac_max_iters=max_iters, ransac_min_inliers=min_inliers, max_pairs=max_pairs, seed=cfg.seed,
    )
    matcher = pairing.FileMatcher(matches_path) if matches_path else None
    frame_a, frame_b = raw_container.read_frame(path_a), raw_container.read_frame(path_b)
    pairs, manifest = pairing.build_pairs(frame_a, frame_b, pcfg, matcher)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        raw_container.write_frame(pair.patch_a, out_dir / f"pair_{i:04d}_a.rgg4")
        raw_container.write_frame(pair.patch_b, out_dir / f"pair_{i:04d}_b.rgg4")
        manifest["pairs"][i]["files"] = [f"pair_{i:04d}_a.rgg4", f"pair_{i:04d}_b.rgg4"]
    manifest_path = pairing.save_manifest(manifest, out_dir / "manifest.json")
    _emit(cfg, {"ok": True, "pairs": len(pairs), "manifest": str(manifest_path), "warning": manifest["warning"]},
          f"{len(pairs)} pair(s), manifest {manifest_path}" + (f" ({manifest['warning']})" if manifest["warning"] else ""))
