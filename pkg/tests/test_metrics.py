import json
import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(__file__)))

from raw2raw import metrics
from raw2raw.exceptions import FormatError, ShapeMismatchError
from raw2raw.raw_container import RawFrame, make_meta

META = make_meta(camera_id="cam-a", black_level=(0, 0, 0, 0), white_level=1023)


def _frame(planes):
    return RawFrame(channels=planes, meta=META)


def _random_pair(seed, size=32):
    rng = np.random.default_rng(seed)
    return _frame(rng.random((4, size, size))), _frame(rng.random((4, size, size)))


# ---- direct-definition oracles ----
def _ssim_oracle(p, r):
    cfg = metrics.SsimConfig()
    w = cfg.window_2d()
    n = cfg.window
    values = []
    for i in range(p.shape[0] - n + 1):
        for j in range(p.shape[1] - n + 1):
            a, b = p[i:i + n, j:j + n], r[i:i + n, j:j + n]
            mu_a, mu_b = (w * a).sum(), (w * b).sum()
            va = (w * (a - mu_a) ** 2).sum()
            vb = (w * (b - mu_b) ** 2).sum()
            cov = (w * (a - mu_a) * (b - mu_b)).sum()
            values.append(((2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2))
                          / ((mu_a ** 2 + mu_b ** 2 + cfg.c1) * (va + vb + cfg.c2)))
    return float(np.mean(values))


def _kl_oracle(p, r, bins=256, eps=1e-10):
    def hist(x):
        counts = [0] * bins
        for v in x.ravel():
            counts[min(int(v * bins), bins - 1)] += 1
        d = np.array(counts, dtype=np.float64) / x.size + eps
        return d / d.sum()

    hp, hr = hist(p), hist(r)
    return 0.5 * (np.sum(hp * np.log(hp / hr)) + np.sum(hr * np.log(hr / hp)))


def test_metrics_match_direct_definitions():
    for seed in range(20):
        pred, ref = _random_pair(seed)
        p = pred.channels.astype(np.float64)
        r = ref.channels.astype(np.float64)
        assert metrics.mae(pred, ref) == pytest.approx(np.abs(p - r).sum() / p.size, abs=1e-6)
        assert metrics.psnr(pred, ref) == pytest.approx(10 * math.log10(1.0 / ((p - r) ** 2).mean()), abs=1e-6)
        if seed < 3:
            expected = np.mean([_ssim_oracle(p[c], r[c]) for c in range(4)])
            assert metrics.ssim(pred, ref) == pytest.approx(expected, abs=1e-6)
        expected_kl = np.mean([_kl_oracle(p[c], r[c]) for c in range(4)])
        assert metrics.sym_kl(pred, ref) == pytest.approx(expected_kl, abs=1e-6)


# ---- MAE / PSNR ----
def test_mae_examples():
    ref = _frame(np.full((4, 8, 8), 0.25))
    assert metrics.mae(ref, ref) == 0.0
    assert metrics.mae(_frame(np.full((4, 8, 8), 0.75)), _frame(np.full((4, 8, 8), 0.5))) == 0.25


def test_psnr_examples():
    ref = _frame(np.full((4, 8, 8), 0.5))
    assert metrics.psnr(ref, ref) == math.inf
    # 0.1 and 0.01 are not exact in float32
    assert metrics.psnr(_frame(np.full((4, 8, 8), 0.6)), ref) == pytest.approx(20.0, abs=1e-5)
    assert metrics.psnr(_frame(np.full((4, 8, 8), 0.51)), ref) == pytest.approx(40.0, abs=1e-4)
    assert metrics.psnr(_frame(np.full((4, 8, 8), 0.625)), _frame(np.full((4, 8, 8), 0.125))) == pytest.approx(
        10 * math.log10(4.0), abs=1e-12)


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(0)
    ref = rng.uniform(0.2, 0.8, size=(4, 16, 16))
    signs = rng.choice([-1.0, 1.0], size=ref.shape)
    values = [metrics.psnr(_frame(ref + a * signs), _frame(ref)) for a in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_pixel_permutation():
    pred, ref = _random_pair(1)
    perm = np.random.default_rng(2).permutation(32 * 32)

    def shuffle(frame):
        return _frame(frame.channels.reshape(4, -1)[:, perm].reshape(4, 32, 32))

    assert metrics.mae(shuffle(pred), shuffle(ref)) == pytest.approx(metrics.mae(pred, ref), abs=1e-12)
    assert metrics.psnr(shuffle(pred), shuffle(ref)) == pytest.approx(metrics.psnr(pred, ref), abs=1e-9)
    assert metrics.sym_kl(shuffle(pred), shuffle(ref)) == pytest.approx(metrics.sym_kl(pred, ref), abs=1e-12)
    # SSIM looks at local structure, so shuffling one side changes it
    smooth = _frame(np.tile(np.linspace(0, 1, 32), (4, 32, 1)))
    assert metrics.ssim(shuffle(smooth), smooth) < 0.5


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        metrics.mae(_frame(np.zeros((4, 4, 4))), _frame(np.zeros((4, 4, 5))))


# ---- SSIM ----
def test_ssim_of_identical_frames_is_exactly_one():
    pred, _ = _random_pair(3)
    assert metrics.ssim(pred, pred) == 1.0


def test_ssim_of_constant_frames():
    c1 = 1e-4
    value = metrics.ssim(_frame(np.full((4, 16, 16), 0.2)), _frame(np.full((4, 16, 16), 0.8)))
    assert value == pytest.approx((2 * 0.16 + c1) / (0.04 + 0.64 + c1), abs=1e-6)
    assert value == pytest.approx(0.4707, abs=1e-4)


def test_ssim_needs_a_full_window():
    with pytest.raises(ShapeMismatchError):
        metrics.ssim(_frame(np.zeros((4, 10, 32))), _frame(np.zeros((4, 10, 32))))


def test_ssim_is_thread_count_independent():
    pred, ref = _random_pair(4)
    assert metrics.ssim(pred, ref, threads=1) == metrics.ssim(pred, ref, threads=4)


# ---- KL ----
def test_sym_kl_identity_and_symmetry():
    pred, ref = _random_pair(5)
    assert metrics.sym_kl(pred, pred) == 0.0
    assert metrics.sym_kl(pred, ref) == metrics.sym_kl(ref, pred)
    assert metrics.sym_kl(pred, ref) >= 0.0


def test_sym_kl_two_spikes():
    eps = 1e-10
    z = 1.0 + 256 * eps
    # spike bin: (1 + eps) / z against eps / z, the other spike mirrors it
    expected = math.log((1.0 + eps) / eps) / z
    value = metrics.sym_kl(_frame(np.full((4, 8, 8), 0.25)), _frame(np.full((4, 8, 8), 0.75)))
    assert value == pytest.approx(expected, rel=1e-9)


# ---- reports ----
def test_report_of_identical_frames():
    pred, _ = _random_pair(6)
    report = metrics.evaluate_pair(pred, pred)
    assert (report.mae, report.psnr, report.ssim, report.kl_sym) == (0.0, math.inf, 1.0, 0.0)
    assert report.to_dict()["psnr_db"] == "inf"


def test_report_matches_individual_metrics():
    pred, ref = _random_pair(7)
    report = metrics.evaluate_pair(pred, ref)
    assert report.mae == pytest.approx(metrics.mae(pred, ref), abs=1e-12)
    assert report.psnr == pytest.approx(metrics.psnr(pred, ref), abs=1e-12)
    assert report.ssim == pytest.approx(metrics.ssim(pred, ref), abs=1e-12)
    assert report.kl_sym == pytest.approx(metrics.sym_kl(pred, ref), abs=1e-12)
    assert len(report.per_channel["ssim"]) == 4


def test_report_round_trip(tmp_path):
    pred, ref = _random_pair(8)
    for report in (metrics.evaluate_pair(pred, ref), metrics.evaluate_pair(pred, pred)):
        back = metrics.load_report(metrics.save_report(report, tmp_path / "r.json"))
        assert back == report


def test_evaluate_many_averages_pairs():
    pairs = [_random_pair(9), _random_pair(10)]
    mean, reports = metrics.evaluate_many(pairs)
    assert len(reports) == 2
    assert mean.mae == pytest.approx((reports[0].mae + reports[1].mae) / 2)
    assert mean.per_channel["kl_sym"][3] == pytest.approx(
        (reports[0].per_channel["kl_sym"][3] + reports[1].per_channel["kl_sym"][3]) / 2)


def test_render_report_lists_channels():
    pred, ref = _random_pair(11)
    text = metrics.render_report(metrics.evaluate_pair(pred, ref))
    for name in ("all", "R", "Gr", "Gb", "B", "PSNR (dB)"):
        assert name in text


def _report_payload():
    pred, ref = _random_pair(12)
    return metrics.evaluate_pair(pred, ref).to_dict()


def test_report_missing_per_channel_is_a_format_error(tmp_path):
    payload = _report_payload()
    del payload["per_channel"]
    (tmp_path / "r.json").write_text(json.dumps(payload))
    with pytest.raises(FormatError):
        metrics.load_report(tmp_path / "r.json")


@pytest.mark.parametrize("metric", ["mae", "psnr_db", "ssim", "kl_sym"])
def test_report_per_channel_needs_four_values(tmp_path, metric):
    payload = _report_payload()
    payload["per_channel"][metric] = payload["per_channel"][metric][:3]
    (tmp_path / "r.json").write_text(json.dumps(payload))
    with pytest.raises(FormatError):
        metrics.load_report(tmp_path / "r.json")


@pytest.mark.parametrize("key,value", [("psnr_db", "infinite"), ("mae", "0.1"), ("extra", 1.0)])
def test_report_values_are_checked(tmp_path, key, value):
    payload = _report_payload()
    payload[key] = value
    (tmp_path / "r.json").write_text(json.dumps(payload))
    with pytest.raises(FormatError):
        metrics.load_report(tmp_path / "r.json")
