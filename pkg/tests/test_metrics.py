import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from rgvsr.dataseq import FrameSequence, SequencePair, make_lr
from rgvsr.metrics import (
    CAP_DB,
    MetricsReport,
    SequenceScores,
    ablate_n,
    bicubic_upscaler,
    evaluate,
    evaluate_sequences,
    mse_distance,
    psnr,
    read_flow,
    read_flow_dir,
    ssim,
    static_metric,
    temporal_perceptual_metric,
    variance_distance_metric,
    warping_error_metric,
    write_ablation_csv,
    write_flow,
)
from rgvsr.losses import sequence_static_loss, temporal_statistics_loss
from rgvsr.resample import FlowStack, multi_warp
from rgvsr.synthetic import toy_dataset, warp_pair

import oracles


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


# ---------------------------------------------------------------- psnr / ssim


def test_psnr_identical_is_capped():
    x = torch.rand(3, 8, 8)
    assert psnr(x, x) == CAP_DB


def test_psnr_known_mse():
    a = torch.zeros(3, 4, 4, dtype=torch.float64)
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_oracle(rng):
    a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
    assert psnr(t64(a), t64(b)) == pytest.approx(oracles.psnr(a, b), rel=1e-12)


def test_psnr_crop_ignores_border():
    a = torch.zeros(3, 12, 12, dtype=torch.float64)
    b = a.clone()
    b[..., 0, :] = 1
    assert psnr(a, b, crop=4) == CAP_DB
    assert psnr(a, b) < CAP_DB


@settings(max_examples=40, deadline=None)
@given(e1=st.floats(1e-4, 0.5), e2=st.floats(1e-4, 0.5))
def test_psnr_strictly_decreasing_in_error(e1, e2):
    a = torch.zeros(3, 2, 2, dtype=torch.float64)
    p1, p2 = psnr(a + e1, a), psnr(a + e2, a)
    if e1 < e2 and e2 - e1 > 1e-9:
        assert p1 > p2


def test_ssim_self_is_one(rng):
    x = t64(rng.random((3, 16, 16)))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_loop_oracle(rng):
    a = rng.random((2, 13, 14))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(t64(a), t64(b)) == pytest.approx(oracles.ssim(a, b), abs=1e-10)


def test_ssim_matches_scikit_image(rng):
    a = rng.random((24, 24))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    ref, full = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                      data_range=1.0, full=True)
    valid = full[5:-5, 5:-5].mean()
    assert ssim(t64(a)[None], t64(b)[None]) == pytest.approx(valid, abs=1e-8)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))


# ---------------------------------------------------------------- temporal metrics


def test_temporal_metrics_are_log_transformed_losses(rng):
    est, gt = t64(rng.random((4, 3, 6, 6))), t64(rng.random((4, 3, 6, 6)))
    assert static_metric(est, gt) == pytest.approx(-20 * math.log10(sequence_static_loss(est, gt).item()))
    assert variance_distance_metric(est, gt) == pytest.approx(
        -20 * math.log10(temporal_statistics_loss(est, gt).item()))


def test_temporal_metrics_cap_on_perfect_sequences(rng):
    s = t64(rng.random((3, 3, 6, 6)))
    assert static_metric(s[:1].expand(3, -1, -1, -1), s) == CAP_DB
    assert variance_distance_metric(s, s) == CAP_DB


def test_static_metric_order_reversing(rng):
    gt = t64(rng.random((1, 3, 6, 6))).expand(3, -1, -1, -1)
    noise = t64(rng.normal(size=(3, 3, 6, 6)))
    assert static_metric(gt + 0.01 * noise, gt) > static_metric(gt + 0.1 * noise, gt)


def test_temporal_metrics_need_two_frames():
    with pytest.raises(ValueError):
        static_metric(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4))


def test_warping_error_static_sequence_zero_flow_is_capped():
    frame = torch.rand(1, 3, 16, 16)
    seq = frame.expand(3, -1, -1, -1)
    flows = [torch.zeros(2, 16, 16)] * 2
    assert warping_error_metric(seq, flows) == CAP_DB


def test_warping_error_integer_translation():
    prev, cur = warp_pair(size=20, translation=1.0)
    seq = torch.cat([prev, cur])
    flow = torch.zeros(2, 20, 20, dtype=torch.float64)
    flow[0] = 1.0
    # only the clamped last column differs, and the 4-pixel crop removes it
    assert warping_error_metric(seq, [flow]) == CAP_DB
    assert warping_error_metric(seq, [flow], crop=0) < 60


def test_warping_error_matches_recomposition(rng):
    seq = t64(rng.random((3, 3, 12, 12)))
    stacks = [FlowStack(t64(rng.normal(size=(1, 2, 12, 12))), t64(rng.normal(size=(1, 2, 12, 12))),
                        torch.softmax(t64(rng.normal(size=(1, 2, 12, 12))), 1)) for _ in range(2)]
    expected = sum(psnr(seq[t:t + 1], multi_warp(seq[t - 1:t], stacks[t - 1]), crop=4) for t in (1, 2)) / 2
    assert warping_error_metric(seq, stacks) == pytest.approx(expected, rel=1e-12)


def test_warping_error_missing_flow():
    with pytest.raises(ValueError):
        warping_error_metric(torch.rand(3, 3, 8, 8), [torch.zeros(2, 8, 8), None])


def test_temporal_perceptual_metric_cases(rng):
    est, gt = t64(rng.random((3, 3, 4, 4))), t64(rng.random((3, 3, 4, 4)))
    assert temporal_perceptual_metric(None, est, gt) is None
    assert temporal_perceptual_metric(mse_distance, gt, gt) == 0
    assert temporal_perceptual_metric(lambda a, b: 3.0, est, gt) == 0


def test_temporal_perceptual_mse_two_frames():
    est = torch.stack([torch.zeros(3, 2, 2), torch.full((3, 2, 2), 0.5)]).double()
    gt = torch.stack([torch.zeros(3, 2, 2), torch.full((3, 2, 2), 0.2)]).double()
    assert temporal_perceptual_metric(mse_distance, est, gt) == pytest.approx(0.25 - 0.04)


# ---------------------------------------------------------------- flow files


def test_flow_file_round_trip_and_layout(tmp_path):
    uv = torch.randn(2, 5, 7)
    write_flow(tmp_path / "f.flo", uv)
    data = (tmp_path / "f.flo").read_bytes()
    assert data[:8] == (5).to_bytes(4, "little") + (7).to_bytes(4, "little")
    assert len(data) == 8 + 2 * 35 * 4
    assert torch.equal(read_flow(tmp_path / "f.flo"), uv)


def test_flow_file_truncated(tmp_path):
    write_flow(tmp_path / "f.flo", torch.zeros(2, 3, 3))
    (tmp_path / "g.flo").write_bytes((tmp_path / "f.flo").read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_flow(tmp_path / "g.flo")


def test_flow_dir_reports_missing_pairs(tmp_path):
    write_flow(tmp_path / "000001.flo", torch.zeros(2, 3, 3))
    flows = read_flow_dir(tmp_path, 3)
    assert flows[0] is not None and flows[1] is None


# ---------------------------------------------------------------- ablation


def test_ablation_identical_frames_all_capped():
    x, _ = warp_pair(size=20)
    rows = ablate_n((x, x), [1, 2, 5], 50)
    assert all(r.psnr == CAP_DB for r in rows)


def test_ablation_monotone_on_translation():
    rows = ablate_n(warp_pair(size=32, translation=1.0), [1, 2, 5], 150)
    scores = [r.psnr for r in rows]
    assert all(b >= a - 0.1 for a, b in zip(scores, scores[1:]))


def test_ablation_embedding_never_loses():
    rows = ablate_n(warp_pair(size=24, translation=0.7, deformation=1.0), [1, 3], 60)
    assert rows[1].psnr >= rows[0].psnr - 1e-9
    assert rows[1].psnr >= rows[1].fit_psnr


def test_ablation_needs_two_frames_and_steps():
    with pytest.raises(ValueError):
        ablate_n(torch.rand(1, 3, 8, 8), [1], 10)
    with pytest.raises(ValueError):
        ablate_n(torch.rand(2, 3, 8, 8), [1], 0)


def test_ablation_csv(tmp_path):
    rows = ablate_n(warp_pair(size=16), [1, 2], 5)
    write_ablation_csv(rows, tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0][:2] == ["n", "psnr_db"]
    assert [r[0] for r in table[1:]] == ["1", "2"]


# ---------------------------------------------------------------- reports


def _pair(name, frames, scale=4):
    hr = FrameSequence(frames, name=name)
    return SequencePair(hr, make_lr(hr, scale))


def test_identity_upscaler_scores_perfectly():
    pairs = toy_dataset(2, 3, 32, seed=2)
    gt = {p.name: p.hr.frames for p in pairs}
    order = iter(sorted(gt))
    report = evaluate_sequences(lambda lr: gt[next(order)], pairs, use_gt_flows=False)
    agg = report.aggregate()
    assert agg["psnr"] == CAP_DB and agg["ssim"] == pytest.approx(1.0)
    assert agg["var_dist_db"] == CAP_DB
    # the masked loss of a moving ground truth against itself is small but not zero
    own = [static_metric(gt[k], gt[k]) for k in sorted(gt)]
    assert agg["static_db"] == pytest.approx(sum(own) / len(own))


def test_bicubic_baseline_report(tmp_path):
    pairs = toy_dataset(2, 3, 32, seed=3)
    report = evaluate_sequences(bicubic_upscaler(4), pairs[::-1], use_gt_flows=True)
    assert [s.name for s in report.sequences] == sorted(p.name for p in pairs)
    agg = report.aggregate()
    assert 10 < agg["psnr"] < 60
    assert agg["warp_err_db"] is not None
    assert agg["t_perceptual"] is None
    report.write(tmp_path)
    text = (tmp_path / "metrics.txt").read_text()
    assert "unavailable" in text
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[-1][0] == "MEAN" and rows[-1][-1] == "NA"


def test_missing_metrics_are_flagged_not_zero():
    report = MetricsReport([SequenceScores("a", 30, 0.9, 40, 40, None, None)])
    agg = report.aggregate()
    assert agg["warp_err_db"] is None and agg["t_perceptual"] is None
    assert "unavailable" in report.summary()


def test_evaluate_rejects_empty_dataset_and_missing_checkpoint(tmp_path):
    with pytest.raises(ValueError):
        evaluate_sequences(bicubic_upscaler(4), [])
    with pytest.raises(ValueError):
        evaluate(tmp_path / "missing.rgv", toy_dataset(1, 2, 16))


def test_evaluate_is_deterministic():
    pairs = toy_dataset(1, 3, 32, seed=4)
    a = evaluate_sequences(bicubic_upscaler(4), pairs).aggregate()
    b = evaluate_sequences(bicubic_upscaler(4), pairs).aggregate()
    assert a == b
