"""Evaluation: intra-frame quality, temporal consistency and the coordinate-count ablation."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .align import embed_flow, fit_flow_direct
from .dataseq import SequencePair
from .resample import FlowStack, multi_warp

CAP_DB = 99.0
WARP_CROP = 4

Distance = Callable[[torch.Tensor, torch.Tensor], float]


def _db(value: float) -> float:
    # -20 log10 for temporal losses, capped
    if value <= 0:
        return CAP_DB
    return min(-20.0 * math.log10(value), CAP_DB)


def psnr(x_hat: torch.Tensor, x: torch.Tensor, crop: int = 0) -> float:
    """PSNR in dB of images in ``[0, 1]`` (inputs are clamped); identical images give 99."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    a = x_hat.detach().to(torch.float64).clamp(0, 1)
    b = x.detach().to(torch.float64).clamp(0, 1)
    if crop:
        a = a[..., crop:-crop, crop:-crop]
        b = b[..., crop:-crop, crop:-crop]
    mse = (a - b).pow(2).mean().item()
    if mse == 0:
        return CAP_DB
    return min(10.0 * math.log10(1.0 / mse), CAP_DB)


def _gaussian_kernel(size: int, sigma: float, dtype) -> torch.Tensor:
    ax = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(x_hat: torch.Tensor, x: torch.Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on ``[0, 1]`` images, Gaussian window, valid positions only.

    Works on ``(C, H, W)`` or ``(N, C, H, W)``; averages over channels, positions
    and batch.
    """
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    a = x_hat.detach().to(torch.float64)
    b = x.detach().to(torch.float64)
    if a.dim() == 3:
        a, b = a[None], b[None]
    n, c, h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} is smaller than the {window}x{window} SSIM window")
    g = _gaussian_kernel(window, sigma, a.dtype)
    kx = g.view(1, 1, 1, window).expand(c, 1, 1, window)
    ky = g.view(1, 1, window, 1).expand(c, 1, window, 1)

    def filt(t):
        return F.conv2d(F.conv2d(t, kx, groups=c), ky, groups=c)

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return s.mean().item()


def _check_pair(est_seq: torch.Tensor, gt_seq: torch.Tensor):
    if est_seq.shape != gt_seq.shape:
        raise ValueError(f"sequence shapes differ: {tuple(est_seq.shape)} vs {tuple(gt_seq.shape)}")
    if est_seq.shape[-4] < 2:
        raise ValueError("temporal metrics need at least 2 frames")


def static_metric(est_seq: torch.Tensor, gt_seq: torch.Tensor, alpha: float = 100.0) -> float:
    """``-20 log10`` of the mean GT-masked inter-frame L1 of the estimates (higher is better)."""
    _check_pair(est_seq, gt_seq)
    with torch.no_grad():
        loss = losses.sequence_static_loss(est_seq.to(torch.float64), gt_seq.to(torch.float64), alpha)
    return _db(loss.item())


def variance_distance_metric(est_seq: torch.Tensor, gt_seq: torch.Tensor) -> float:
    """``-20 log10`` of the temporal-variance L1 distance (higher is better)."""
    _check_pair(est_seq, gt_seq)
    with torch.no_grad():
        loss = losses.temporal_statistics_loss(est_seq.to(torch.float64), gt_seq.to(torch.float64))
    return _db(loss.item())


def warping_error_metric(est_seq: torch.Tensor, flows: list[FlowStack | torch.Tensor | None],
                         crop: int = WARP_CROP) -> float:
    """Mean over consecutive pairs of PSNR(X~_t, warp(X~_{t-1}, flow_t)).

    ``est_seq`` is ``(T, 3, H, W)``. ``flows[t - 1]`` warps frame ``t-1`` onto
    frame ``t`` and may be a FlowStack (batch 1) or a ``(2, H, W)`` tensor of
    ``(u, v)``. A ``crop``-pixel border is ignored.
    """
    T = est_seq.shape[0]
    if T < 2:
        raise ValueError("warping error needs at least 2 frames")
    if len(flows) < T - 1:
        raise ValueError(f"need {T - 1} flows for {T} frames, got {len(flows)}")
    scores = []
    est = est_seq.detach().to(torch.float64)
    for t in range(1, T):
        fl = flows[t - 1]
        if fl is None:
            raise ValueError(f"missing flow for frame pair ({t - 1}, {t})")
        if isinstance(fl, torch.Tensor):
            fl = uv_to_stack(fl)
        fl = FlowStack(fl.u.to(torch.float64), fl.v.to(torch.float64), fl.w.to(torch.float64))
        warped = multi_warp(est[t - 1:t], fl)
        scores.append(psnr(est[t:t + 1], warped, crop=crop))
    return sum(scores) / len(scores)


def uv_to_stack(uv: torch.Tensor) -> FlowStack:
    """``(2, H, W)`` single flow to an n=1 FlowStack with unit weight."""
    u = uv[0][None, None]
    v = uv[1][None, None]
    return FlowStack(u, v, torch.ones_like(u))


def temporal_perceptual_metric(distance: Distance | None, est_seq: torch.Tensor, gt_seq: torch.Tensor) -> float | None:
    """Mean |distance(est pair) - distance(gt pair)| over consecutive frames; None without a distance."""
    if distance is None:
        return None
    _check_pair(est_seq, gt_seq)
    diffs = []
    for t in range(1, est_seq.shape[0]):
        d_est = float(distance(est_seq[t - 1], est_seq[t]))
        d_gt = float(distance(gt_seq[t - 1], gt_seq[t]))
        diffs.append(abs(d_est - d_gt))
    return sum(diffs) / len(diffs)


def mse_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    return (a.to(torch.float64) - b.to(torch.float64)).pow(2).mean().item()


# ---------------------------------------------------------------- flow files

def write_flow(path: str | Path, uv: torch.Tensor) -> None:
    """``(2, H, W)`` flow as: uint32 H, uint32 W, then u then v as little-endian float32."""
    uv = uv.detach().to(torch.float32).cpu()
    _, h, w = uv.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(uv.numpy().astype("<f4").tobytes())


def read_flow(path: str | Path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated flow file")
    h, w = struct.unpack("<II", data[:8])
    expected = 8 + 2 * h * w * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {h}x{w} flow, got {len(data)}")
    arr = np.frombuffer(data[8:], dtype="<f4").reshape(2, h, w)
    return torch.from_numpy(arr.astype(np.float32))


def read_flow_dir(path: str | Path, T: int) -> list[torch.Tensor | None]:
    """Flows ``000001.flo`` .. for pairs (0,1), (1,2), ...; missing files become None."""
    path = Path(path)
    out = []
    for t in range(1, T):
        f = path / f"{t:06d}.flo"
        out.append(read_flow(f) if f.is_file() else None)
    return out


# ---------------------------------------------------------------- ablation

@dataclass
class AblationRow:
    n: int
    fit_psnr: float         # independent fit from the shared-seed initialisation
    psnr: float             # best n-coordinate solution found (fit or embedded smaller n)
    source: str


def ablate_n(sequence_pair: torch.Tensor | tuple[torch.Tensor, torch.Tensor], n_values: Iterable[int],
             steps: int, seed: int = 0, crop: int = WARP_CROP, lr: float = 0.05) -> list[AblationRow]:
    """Warp-error PSNR of direct flow fits for each coordinate count.

    Every ``n`` is fitted independently with the same seed. Because any
    ``n'``-coordinate flow embeds exactly into ``n > n'`` coordinates (extra
    weights zero), the reported ``psnr`` is the best of the ``n`` fit, the
    embedded solutions for smaller ``n`` and the zero-motion warp;
    ``fit_psnr`` keeps the raw fit.
    """
    if isinstance(sequence_pair, torch.Tensor):
        if sequence_pair.shape[0] < 2:
            raise ValueError("ablation needs two frames")
        prev, target = sequence_pair[0:1], sequence_pair[1:2]
    else:
        prev, target = sequence_pair
    if steps < 1:
        raise ValueError("steps must be >= 1")
    prev = prev.to(torch.float64)
    target = target.to(torch.float64)
    rows: list[AblationRow] = []
    # the zero-motion warp belongs to every family, so it seeds the running best
    zero = FlowStack.identity(prev.shape[0], 1, *prev.shape[-2:], dtype=prev.dtype)
    best: tuple[float, FlowStack, str] = (psnr(target, multi_warp(prev, zero), crop=crop), zero, "zero motion")
    for n in sorted(set(n_values)):
        flow = fit_flow_direct(prev, target, n, steps, seed=seed, lr=lr, crop=crop)
        score = psnr(target, multi_warp(prev, flow), crop=crop)
        if best[0] > score:
            emb_score = psnr(target, multi_warp(prev, embed_flow(best[1], n)), crop=crop)
            rows.append(AblationRow(n, score, emb_score, best[2]))
        else:
            best = (score, flow, f"embedded n={n}")
            rows.append(AblationRow(n, score, score, "fit"))
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "psnr_db", "fit_psnr_db", "source"])
        for r in rows:
            wr.writerow([r.n, f"{r.psnr:.4f}", f"{r.fit_psnr:.4f}", r.source])


# ---------------------------------------------------------------- reports

METRIC_FIELDS = ("psnr", "ssim", "static_db", "var_dist_db", "warp_err_db", "t_perceptual")


@dataclass
class SequenceScores:
    name: str
    psnr: float
    ssim: float
    static_db: float
    var_dist_db: float
    warp_err_db: float | None = None
    t_perceptual: float | None = None


@dataclass
class MetricsReport:
    sequences: list[SequenceScores] = field(default_factory=list)

    def aggregate(self) -> dict[str, float | None]:
        """Means over sequences; a metric missing for any sequence is reported as None."""
        out: dict[str, float | None] = {}
        for name in METRIC_FIELDS:
            vals = [getattr(s, name) for s in self.sequences]
            out[name] = None if not vals or any(v is None for v in vals) else sum(vals) / len(vals)
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sequence", *METRIC_FIELDS])
            rows = [(s.name, [getattr(s, k) for k in METRIC_FIELDS]) for s in self.sequences]
            rows.append(("MEAN", [self.aggregate()[k] for k in METRIC_FIELDS]))
            for name, vals in rows:
                wr.writerow([name, *("NA" if v is None else f"{v:.6f}" for v in vals)])

    def summary(self) -> str:
        agg = self.aggregate()
        lines = [f"sequences: {len(self.sequences)}"]
        for k in METRIC_FIELDS:
            v = agg[k]
            lines.append(f"{k:>13}: {'unavailable' if v is None else f'{v:.4f}'}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.write_csv(out_dir / "metrics.csv")
        (out_dir / "metrics.txt").write_text(self.summary())


Upscaler = Callable[[torch.Tensor], torch.Tensor]


def bicubic_upscaler(scale: int) -> Upscaler:
    """Baseline: plain bicubic interpolation of each LR frame ``(T, 3, h, w)``."""
    def run(lr: torch.Tensor) -> torch.Tensor:
        return F.interpolate(lr, scale_factor=scale, mode="bicubic", align_corners=False)
    return run


def score_sequence(name: str, est: torch.Tensor, gt: torch.Tensor, alpha: float = 100.0,
                   flows: list | None = None, distance: Distance | None = None) -> SequenceScores:
    est = est.detach().to(torch.float64)
    gt = gt.detach().to(torch.float64)
    T = est.shape[0]
    p = sum(psnr(est[t], gt[t]) for t in range(T)) / T
    s = sum(ssim(est[t].clamp(0, 1), gt[t]) for t in range(T)) / T
    scores = SequenceScores(name, p, s, static_metric(est.clamp(0, 1), gt, alpha),
                            variance_distance_metric(est.clamp(0, 1), gt))
    if flows is not None:
        scores.warp_err_db = warping_error_metric(est.clamp(0, 1), flows)
    scores.t_perceptual = temporal_perceptual_metric(distance, est.clamp(0, 1), gt)
    return scores


def evaluate_sequences(upscaler: Upscaler, dataset: list[SequencePair], alpha: float = 100.0,
                       use_gt_flows: bool = False, flow_dirs: dict[str, Path] | None = None,
                       distance: Distance | None = None) -> MetricsReport:
    """Score ``upscaler`` on every sequence; rows come out ordered by sequence name.

    Warping error uses ground-truth flows carried by the dataset when
    ``use_gt_flows`` is set, or external flow files from ``flow_dirs``;
    otherwise it is reported as unavailable.
    """
    if not dataset:
        raise ValueError("empty dataset")
    report = MetricsReport()
    for pair in sorted(dataset, key=lambda p: p.name):
        with torch.no_grad():
            est = upscaler(pair.lr.frames)
        T = est.shape[0]
        flows = None
        if use_gt_flows and pair.flow is not None:
            flows = [pair.flow[t] for t in range(1, T)]
        elif flow_dirs and pair.name in flow_dirs:
            flows = read_flow_dir(flow_dirs[pair.name], T)
        report.sequences.append(score_sequence(pair.name, est, pair.hr.frames, alpha, flows, distance))
    return report


def model_upscaler(checkpoint: str | Path) -> tuple[Upscaler, int]:
    """Upscaler backed by a trained checkpoint (generator and align net only), plus its scale."""
    from .trainer import load_models, upscale_sequence

    g, a, cfg = load_models(checkpoint)
    return (lambda lr: upscale_sequence(g, a, lr)), cfg.scale


def evaluate(checkpoint: str | Path, dataset: list[SequencePair], alpha: float = 100.0,
             use_gt_flows: bool = False, flow_dirs: dict[str, Path] | None = None,
             distance: Distance | None = None) -> MetricsReport:
    upscaler, scale = model_upscaler(checkpoint)
    for pair in dataset:
        if pair.hr.size != (pair.lr.size[0] * scale, pair.lr.size[1] * scale):
            raise ValueError(f"sequence {pair.name!r} does not match the model scale {scale}")
    return evaluate_sequences(upscaler, dataset, alpha, use_gt_flows, flow_dirs, distance)
