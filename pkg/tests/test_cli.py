import json
import os
import sys

import numpy as np
import pytest
from click.testing import CliRunner
from scipy import ndimage

sys.path.append(os.path.dirname(os.path.dirname(__file__)))

from raw2raw import config, noise_model, raw_container
from raw2raw.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def _meta(**overrides):
    fields = dict(camera_id="cam-a", black_level=(64, 64, 64, 64), white_level=1023)
    fields.update(overrides)
    return raw_container.make_meta(**fields)


def _write_frame(path, planes, camera_id="cam-a"):
    frame = raw_container.RawFrame(channels=planes, meta=_meta(camera_id=camera_id))
    return raw_container.write_frame(frame, path)


def _texture_frame(path, seed=0, size=160):
    blurred = ndimage.gaussian_filter(np.random.default_rng(seed).random((size, size)), 2.0)
    plane = (blurred - blurred.min()) / (blurred.max() - blurred.min())
    return _write_frame(path, np.stack([plane] * 4))


def _mosaic(tmp_path, drop=(), **changes):
    data = np.random.default_rng(0).integers(64, 1024, size=(64, 48)).astype(np.uint16)
    raw_container.write_pgm(raw_container.RawMosaic(data=data, max_value=1023), tmp_path / "m.pgm")
    sidecar = {"camera_id": "cam-a", "black_level": [64, 64, 64, 64], "white_level": 1023,
               "orientation": "Rot90", "iso": None, "cfa_pattern": "RGGB"}
    sidecar.update(changes)
    for key in drop:
        del sidecar[key]
    (tmp_path / "m.json").write_text(json.dumps(sidecar))
    return tmp_path / "m.pgm", tmp_path / "m.json"


def _linear_profile(path):
    cfg = noise_model.NoiseProfileConfig()
    mv = np.tile(0.01 * cfg.bin_centers() + 1e-4, (4, 1))
    profile = noise_model.NoiseProfile(mean_variance=mv, counts=np.full((4, 100), 5), config=cfg)
    return noise_model.save_profile(profile, path)


# ---- ingest ----
def test_ingest_writes_an_oriented_frame(runner, tmp_path):
    mosaic, meta = _mosaic(tmp_path)
    out = tmp_path / "f.rgg4"
    result = runner.invoke(main, ["ingest", "--mosaic", str(mosaic), "--meta", str(meta), "--out", str(out)])
    assert result.exit_code == 0, result.output
    frame = raw_container.read_frame(out)
    # 64x48 mosaic -> 24x32 planes, turned a quarter
    assert frame.shape == (4, 24, 32)
    assert frame.meta.orientation == raw_container.Orientation.NORMAL
    assert json.loads(result.stdout)["ok"] is True


def test_ingest_with_resolution(runner, tmp_path):
    mosaic, meta = _mosaic(tmp_path)
    out = tmp_path / "f.rgg4"
    result = runner.invoke(main, ["ingest", "--mosaic", str(mosaic), "--meta", str(meta), "--out", str(out),
                                  "--resolution", "12x16"])
    assert result.exit_code == 0, result.output
    assert raw_container.read_frame(out).shape == (4, 12, 16)


def test_ingest_rejects_black_above_white(runner, tmp_path):
    mosaic, meta = _mosaic(tmp_path, black_level=[2000, 64, 64, 64])
    result = runner.invoke(main, ["ingest", "--mosaic", str(mosaic), "--meta", str(meta),
                                  "--out", str(tmp_path / "f.rgg4")])
    assert result.exit_code == 3
    body = json.loads(result.stdout)
    assert body["ok"] is False and body["exit_code"] == 3
    assert "black_level" in body["error"]


def test_reingesting_a_container_is_a_format_error(runner, tmp_path):
    mosaic, meta = _mosaic(tmp_path)
    out = tmp_path / "f.rgg4"
    runner.invoke(main, ["ingest", "--mosaic", str(mosaic), "--meta", str(meta), "--out", str(out)])
    result = runner.invoke(main, ["ingest", "--mosaic", str(out), "--meta", str(meta),
                                  "--out", str(tmp_path / "g.rgg4")])
    assert result.exit_code == 2


@pytest.mark.parametrize("key", ["iso", "orientation", "cfa_pattern"])
def test_ingest_with_incomplete_sidecar_exits_3(runner, tmp_path, key):
    mosaic, meta = _mosaic(tmp_path, drop=(key,))
    result = runner.invoke(main, ["ingest", "--mosaic", str(mosaic), "--meta", str(meta),
                                  "--out", str(tmp_path / "f.rgg4")])
    assert result.exit_code == 3
    body = json.loads(result.stdout)
    assert body["type"] == "MetadataError"
    assert key in body["error"]


def test_ingest_with_string_white_level_exits_3(runner, tmp_path):
    mosaic, meta = _mosaic(tmp_path, white_level="1023")
    result = runner.invoke(main, ["ingest", "--mosaic", str(mosaic), "--meta", str(meta),
                                  "--out", str(tmp_path / "f.rgg4")])
    assert result.exit_code == 3


def test_text_errors_go_to_stderr(runner, tmp_path):
    mosaic, meta = _mosaic(tmp_path, black_level=[2000, 64, 64, 64])
    result = runner.invoke(main, ["--format", "text", "ingest", "--mosaic", str(mosaic), "--meta", str(meta),
                                  "--out", str(tmp_path / "f.rgg4")])
    assert result.exit_code == 3
    assert result.stdout == ""
    assert "error:" in result.stderr


# ---- noise ----
def test_profile_and_noise_distance_with_itself(runner, tmp_path):
    frame = _texture_frame(tmp_path / "f.rgg4")
    out = tmp_path / "p.json"
    result = runner.invoke(main, ["profile", "--in", str(frame), "--out", str(out), "--bins", "50"])
    assert result.exit_code == 0, result.output
    assert noise_model.load_profile(out).bins == 50

    result = runner.invoke(main, ["noise-distance", "--fake", str(out), "--real", str(out)])
    assert result.exit_code == 0
    assert json.loads(result.stdout)["noise_distance"] == 0.0


def test_profile_without_flat_patches_exits_4(runner, tmp_path, monkeypatch):
    frame = _texture_frame(tmp_path / "f.rgg4")
    monkeypatch.setattr(noise_model, "_flat_mask", lambda plane, cfg: np.zeros((10, 10), dtype=bool))
    result = runner.invoke(main, ["profile", "--in", str(frame), "--out", str(tmp_path / "p.json")])
    assert result.exit_code == 4
    assert json.loads(result.stdout)["type"] == "NoFlatPatchesError"


def test_profile_with_bad_percentile_exits_3(runner, tmp_path):
    frame = _texture_frame(tmp_path / "f.rgg4")
    result = runner.invoke(main, ["profile", "--in", str(frame), "--out", str(tmp_path / "p.json"),
                                  "--percentile", "1.5"])
    assert result.exit_code == 3


def test_profile_is_byte_identical_across_thread_counts(runner, tmp_path):
    noisy = noise_model.synthesize_noise(
        raw_container.RawFrame(channels=np.full((4, 128, 128), 0.4), meta=_meta()),
        noise_model.PoissonGaussianParams(0.01, 1e-4), seed=1,
    )
    src = raw_container.write_frame(noisy, tmp_path / "n.rgg4")
    outputs = []
    for threads in ("1", "4", "4"):
        out = tmp_path / f"p{len(outputs)}.json"
        result = runner.invoke(main, ["--threads", threads, "profile", "--in", str(src), "--out", str(out)])
        assert result.exit_code == 0, result.output
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


@pytest.mark.parametrize("flag,expected", [(None, 3), ("0", 0), ("2", 2)])
def test_threads_flag_overrides_environment(runner, tmp_path, monkeypatch, flag, expected):
    frame = _texture_frame(tmp_path / "f.rgg4", size=64)
    monkeypatch.setattr(config, "RAW2RAW_THREADS", 3)
    seen = []
    build = noise_model.build_noise_profile_multi

    def _spy(frames, cfg=None, threads=None):
        seen.append(threads)
        return build(frames, cfg, threads=threads)

    monkeypatch.setattr(noise_model, "build_noise_profile_multi", _spy)
    args = [] if flag is None else ["--threads", flag]
    result = runner.invoke(main, args + ["profile", "--in", str(frame), "--out", str(tmp_path / "p.json")])
    assert result.exit_code == 0, result.output
    assert seen == [expected]


def test_profile_records_gradient_source(runner, tmp_path):
    frame = _texture_frame(tmp_path / "f.rgg4", size=64)
    out = tmp_path / "p.json"
    result = runner.invoke(main, ["profile", "--in", str(frame), "--out", str(out), "--gradient-source", "own"])
    assert result.exit_code == 0, result.output
    assert noise_model.load_profile(out).config.gradient_source == "own"


def test_profile_of_duplicate_inputs_doubles_counts(runner, tmp_path):
    frame = _texture_frame(tmp_path / "f.rgg4")
    runner.invoke(main, ["profile", "--in", str(frame), "--out", str(tmp_path / "one.json")])
    result = runner.invoke(main, ["profile", "--in", str(frame), "--in", str(frame), "--out", str(tmp_path / "two.json")])
    assert result.exit_code == 0, result.output
    one = noise_model.load_profile(tmp_path / "one.json")
    two = noise_model.load_profile(tmp_path / "two.json")
    assert np.array_equal(two.mean_variance, one.mean_variance)
    assert np.array_equal(two.counts, 2 * one.counts)


def test_profile_matches_library_call(runner, tmp_path):
    frame = _texture_frame(tmp_path / "f.rgg4", seed=3)
    result = runner.invoke(main, ["profile", "--in", str(frame), "--out", str(tmp_path / "cli.json")])
    assert result.exit_code == 0, result.output
    direct = noise_model.build_noise_profile(raw_container.read_frame(frame))
    noise_model.save_profile(direct, tmp_path / "lib.json")
    assert (tmp_path / "cli.json").read_bytes() == (tmp_path / "lib.json").read_bytes()


def test_synth_profile_fit_round_trip(runner, tmp_path):
    col = np.arange(256) // 16
    plane = np.tile(0.05 + 0.75 * col / 15, (256, 1))
    clean = _write_frame(tmp_path / "clean.rgg4", np.stack([plane] * 4))
    steps = [
        ["--seed", "2", "synth-noise", "--in", str(clean), "--out", str(tmp_path / "noisy.rgg4"),
         "--alpha", "0.002", "--beta", "1e-4"],
        ["profile", "--in", str(tmp_path / "noisy.rgg4"), "--out", str(tmp_path / "p.json"), "--percentile", "1.0"],
        ["fit-pg", "--profile", str(tmp_path / "p.json")],
    ]
    for args in steps:
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
    alpha = np.array(json.loads(result.stdout)["alpha"])
    assert np.all(np.abs(alpha - 0.002) <= 0.1 * 0.002)


def test_fit_pg_on_exact_profile(runner, tmp_path):
    path = _linear_profile(tmp_path / "p.json")
    result = runner.invoke(main, ["fit-pg", "--profile", str(path), "--out", str(tmp_path / "pg.json")])
    assert result.exit_code == 0, result.output
    body = json.loads(result.stdout)
    assert np.allclose(body["alpha"], 0.01, atol=1e-12)
    assert np.allclose(body["beta"], 1e-4, atol=1e-12)
    assert noise_model.load_params(tmp_path / "pg.json").alpha.shape == (4,)


def test_fit_pg_text_table(runner, tmp_path):
    path = _linear_profile(tmp_path / "p.json")
    result = runner.invoke(main, ["--format", "text", "fit-pg", "--profile", str(path)])
    assert result.exit_code == 0
    assert "0.01" in result.stdout and "0.0001" in result.stdout


def test_profile_missing_counts_exits_2(runner, tmp_path):
    path = _linear_profile(tmp_path / "p.json")
    payload = json.loads(path.read_text())
    del payload["counts"]
    path.write_text(json.dumps(payload))
    result = runner.invoke(main, ["fit-pg", "--profile", str(path)])
    assert result.exit_code == 2


def test_synth_noise_is_seeded(runner, tmp_path):
    src = _write_frame(tmp_path / "c.rgg4", np.full((4, 32, 32), 0.5))
    for name in ("a", "b"):
        result = runner.invoke(main, ["--seed", "5", "synth-noise", "--in", str(src),
                                      "--out", str(tmp_path / f"{name}.rgg4"), "--alpha", "0.01", "--beta", "1e-4"])
        assert result.exit_code == 0, result.output
    assert (tmp_path / "a.rgg4").read_bytes() == (tmp_path / "b.rgg4").read_bytes()


def test_synth_noise_needs_parameters(runner, tmp_path):
    src = _write_frame(tmp_path / "c.rgg4", np.full((4, 8, 8), 0.5))
    result = runner.invoke(main, ["synth-noise", "--in", str(src), "--out", str(tmp_path / "n.rgg4")])
    assert result.exit_code == 3


# ---- calibration ----
def test_calibrate_then_apply(runner, tmp_path):
    rng = np.random.default_rng(2)
    planes = rng.random((4, 16, 16))
    src = _write_frame(tmp_path / "src.rgg4", planes, "phone")
    tgt = _write_frame(tmp_path / "tgt.rgg4", 0.5 * planes, "dslr")
    cmap = tmp_path / "map.json"
    result = runner.invoke(main, ["calibrate", "--src", str(src), "--tgt", str(tgt), "--kind", "linear4",
                                  "--out", str(cmap)])
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["residual_rms"] < 1e-6

    result = runner.invoke(main, ["apply", "--map", str(cmap), "--in", str(src), "--out", str(tmp_path / "o.rgg4")])
    assert result.exit_code == 0, result.output
    mapped = raw_container.read_frame(tmp_path / "o.rgg4")
    assert np.allclose(mapped.channels, raw_container.read_frame(tgt).channels, atol=1e-6)


def test_apply_with_broken_map_exits_2(runner, tmp_path):
    src = _write_frame(tmp_path / "src.rgg4", np.zeros((4, 4, 4)))
    (tmp_path / "map.json").write_text(json.dumps({"kind": "quad14", "matrix": [[1.0]]}))
    result = runner.invoke(main, ["apply", "--map", str(tmp_path / "map.json"), "--in", str(src),
                                  "--out", str(tmp_path / "o.rgg4")])
    assert result.exit_code == 2


# ---- metrics ----
def test_eval_of_identical_frames(runner, tmp_path):
    path = _write_frame(tmp_path / "f.rgg4", np.random.default_rng(3).random((4, 16, 16)))
    result = runner.invoke(main, ["eval", "--pred", str(path), "--ref", str(path)])
    assert result.exit_code == 0, result.output
    body = json.loads(result.stdout)
    assert (body["mae"], body["psnr_db"], body["ssim"], body["kl_sym"]) == (0.0, "inf", 1.0, 0.0)


def test_eval_many_pairs(runner, tmp_path):
    rng = np.random.default_rng(4)
    paths = [_write_frame(tmp_path / f"{i}.rgg4", rng.random((4, 16, 16))) for i in range(3)]
    result = runner.invoke(main, ["eval", "--pred", str(paths[0]), "--ref", str(paths[1]),
                                  "--pred", str(paths[1]), "--ref", str(paths[2])])
    assert result.exit_code == 0, result.output
    body = json.loads(result.stdout)
    assert len(body["pairs"]) == 2
    assert body["mean"]["mae"] == pytest.approx((body["pairs"][0]["mae"] + body["pairs"][1]["mae"]) / 2)


def test_eval_shape_mismatch_exits_2(runner, tmp_path):
    a = _write_frame(tmp_path / "a.rgg4", np.zeros((4, 16, 16)))
    b = _write_frame(tmp_path / "b.rgg4", np.zeros((4, 16, 18)))
    result = runner.invoke(main, ["eval", "--pred", str(a), "--ref", str(b)])
    assert result.exit_code == 2


def test_eval_text_output_to_file(runner, tmp_path):
    path = _write_frame(tmp_path / "f.rgg4", np.random.default_rng(5).random((4, 16, 16)))
    report = tmp_path / "report.txt"
    result = runner.invoke(main, ["--format", "text", "--output", str(report),
                                  "eval", "--pred", str(path), "--ref", str(path)])
    assert result.exit_code == 0, result.output
    assert "PSNR (dB)" in report.read_text()


# ---- pairing ----
def test_pair_writes_crops_and_manifest(runner, tmp_path):
    frame = _texture_frame(tmp_path / "f.rgg4", seed=6)
    out_dir = tmp_path / "pairs"
    result = runner.invoke(main, ["pair", "--a", str(frame), "--b", str(frame), "--out-dir", str(out_dir),
                                  "--crop-size", "64", "--nms-dist", "32"])
    assert result.exit_code == 0, result.output
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["pairs"]
    for entry in manifest["pairs"]:
        for name in entry["files"]:
            assert raw_container.read_frame(out_dir / name).shape == (4, 64, 64)


def test_pair_without_matches_still_exits_0(runner, tmp_path):
    rng = np.random.default_rng(7)
    a = _write_frame(tmp_path / "a.rgg4", rng.random((4, 96, 96)))
    b = _write_frame(tmp_path / "b.rgg4", rng.random((4, 96, 96)))
    result = runner.invoke(main, ["pair", "--a", str(a), "--b", str(b), "--out-dir", str(tmp_path / "p"),
                                  "--crop-size", "32"])
    assert result.exit_code == 0, result.output
    body = json.loads(result.stdout)
    assert body["pairs"] == 0
    assert body["warning"].startswith("no pairs")


def test_pair_is_byte_identical_across_runs_and_threads(runner, tmp_path):
    frame = _texture_frame(tmp_path / "f.rgg4", seed=8)
    outputs = []
    for i, threads in enumerate(("1", "4", "1")):
        out_dir = tmp_path / f"run{i}"
        result = runner.invoke(main, ["--threads", threads, "--seed", "11", "pair", "--a", str(frame),
                                      "--b", str(frame), "--out-dir", str(out_dir),
                                      "--crop-size", "64", "--nms-dist", "32"])
        assert result.exit_code == 0, result.output
        outputs.append({p.name: p.read_bytes() for p in sorted(out_dir.iterdir())})
    assert outputs[0] == outputs[1] == outputs[2]


# ---- reference selection ----
def test_select_ref(runner, tmp_path):
    query = _write_frame(tmp_path / "q.rgg4", np.full((4, 4, 4), 0.5))
    dim = _write_frame(tmp_path / "c0.rgg4", np.full((4, 4, 4), 0.25))
    close = _write_frame(tmp_path / "c1.rgg4", np.full((4, 4, 4), 0.375))
    result = runner.invoke(main, ["select-ref", "--query", str(query), "--candidates", str(dim),
                                  "--candidates", str(close)])
    assert result.exit_code == 0, result.output
    body = json.loads(result.stdout)
    assert body["index"] == 1
    assert body["distance"] == pytest.approx(0.25)
