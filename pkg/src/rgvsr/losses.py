"""Training objectives: pixel, adversarial, texture and temporal losses."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensorio

EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    w_E: float = 0.01
    w_A: float = 0.005
    w_G: float = 1.0
    w_T: float = 0.1
    alpha: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    _check_same(x_hat, x)
    return (x_hat - x).abs().mean()


def adversarial_g_loss(d_out: torch.Tensor) -> torch.Tensor:
    """``-log D(fake)``, averaged over streams."""
    return -torch.log(d_out.clamp_min(EPS)).mean()


def adversarial_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """``-log D(real) - log(1 - D(fake))``, averaged over streams."""
    return (-torch.log(d_real.clamp_min(EPS)) - torch.log((1 - d_fake).clamp_min(EPS))).mean()


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """``F F^T / (h w c)`` for ``(N, C, H, W)`` (or ``(C, H, W)``) features."""
    if features.numel() == 0:
        raise ValueError("empty feature map")
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    n, c, h, w = features.shape
    flat = features.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2) / (h * w * c)
    return g[0] if squeeze else g


class FeatureExtractor(nn.Module):
    """Frozen VGG-style conv stack that returns named activation taps.

    ``widths`` gives the channel count of each stage; a stage is
    ``convs_per_stage`` conv+ReLU layers followed by 2x average pooling (except
    after the last stage). The last ReLU of each stage is tapped as
    ``stage{i}``. With random weights this is the offline default; pretrained
    weights can be loaded from a tensor archive.
    """

    def __init__(self, widths=(16, 32), convs_per_stage: int = 2, kernel: int = 3, pool: bool = True,
                 seed: int = 0):
        super().__init__()
        self.widths = tuple(widths)
        self.convs_per_stage = convs_per_stage
        self.pool = pool
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stages = []
            c_in = 3
            for wd in self.widths:
                convs = []
                for _ in range(convs_per_stage):
                    convs.append(nn.Conv2d(c_in, wd, kernel, padding=kernel // 2))
                    c_in = wd
                stages.append(nn.ModuleList(convs))
            self.stages = nn.ModuleList(stages)
        self.register_buffer("mean", torch.full((1, 3, 1, 1), 0.5))
        self.register_buffer("std", torch.full((1, 3, 1, 1), 0.25))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: always behaves as in inference
        return super().train(False)

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        x = (x - self.mean) / self.std
        taps = {}
        for i, convs in enumerate(self.stages):
            for conv in convs:
                x = F.relu(conv(x))
            taps[f"stage{i}"] = x
            if self.pool and i < len(self.stages) - 1:
                x = F.avg_pool2d(x, 2)
        return taps

    def save_weights(self, path: str | Path) -> None:
        meta = {"kind": "feature_extractor", "widths": list(self.widths),
                "convs_per_stage": self.convs_per_stage, "pool": self.pool}
        tensorio.save(path, dict(self.state_dict()), meta)

    @classmethod
    def from_archive(cls, path: str | Path) -> "FeatureExtractor":
        """Build an extractor from a tensor archive.

        Expected tensor names: ``stages.{i}.{j}.weight`` / ``.bias`` for stage
        ``i`` conv ``j``, plus optional ``mean`` and ``std`` of shape
        ``(1, 3, 1, 1)``. Metadata may carry ``widths``, ``convs_per_stage``
        and ``pool``; otherwise they are inferred from the tensor names.
        """
        tensors, meta = tensorio.load(path)
        if "widths" in meta:
            widths = meta["widths"]
            per = meta.get("convs_per_stage", 2)
        else:
            stage_ids = sorted({int(k.split(".")[1]) for k in tensors if k.startswith("stages.")})
            widths = [tensors[f"stages.{i}.0.weight"].shape[0] for i in stage_ids]
            per = len({k.split(".")[2] for k in tensors if k.startswith("stages.0.")})
        kernel = tensors["stages.0.0.weight"].shape[-1]
        fe = cls(widths, per, kernel, pool=meta.get("pool", True))
        state = fe.state_dict()
        missing = set(state) - set(tensors) - {"mean", "std"}
        if missing:
            raise tensorio.ArchiveError(f"feature-extractor archive lacks {sorted(missing)}")
        for k, v in tensors.items():
            if k not in state:
                raise tensorio.ArchiveError(f"unexpected tensor {k!r} in feature-extractor archive")
            if state[k].shape != v.shape:
                raise tensorio.ArchiveError(f"{k}: shape {tuple(v.shape)} != expected {tuple(state[k].shape)}")
        fe.load_state_dict({**state, **tensors})
        return fe


def _taps(fe, x) -> list[torch.Tensor]:
    out = fe(x)
    if isinstance(out, dict):
        return list(out.values())
    if isinstance(out, torch.Tensor):
        return [out]
    return list(out)


def texture_loss(fe, x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Sum over tapped layers of the mean absolute Gram-matrix difference."""
    _check_same(x_hat, x)
    total = x_hat.new_zeros(())
    for fa, fb in zip(_taps(fe, x_hat), _taps(fe, x)):
        total = total + (gram_matrix(fa) - gram_matrix(fb)).abs().mean()
    return total


def static_mask(x_t: torch.Tensor, x_prev: torch.Tensor, alpha: float = 100.0) -> torch.Tensor:
    """``exp(-alpha * sum_c (X_t - X_{t-1})^2)`` per pixel, shape ``(..., 1, H, W)``."""
    _check_same(x_t, x_prev)
    return torch.exp(-alpha * (x_t - x_prev).pow(2).sum(dim=-3, keepdim=True))


def static_temporal_loss(x_hat_t: torch.Tensor, x_hat_prev: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``mask * |X~_t - X~_{t-1}|`` (channel mean)."""
    _check_same(x_hat_t, x_hat_prev)
    diff = (x_hat_t - x_hat_prev).abs().mean(dim=-3, keepdim=True)
    if mask.shape != diff.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tuple(diff.shape)}")
    return (mask * diff).mean()


def temporal_variance(seq: torch.Tensor, dim: int = -4) -> torch.Tensor:
    return seq.var(dim=dim, unbiased=False)


def temporal_statistics_loss(est_seq: torch.Tensor, gt_seq: torch.Tensor, time_dim: int = -4) -> torch.Tensor:
    """Mean absolute difference of per-pixel population variances over time.

    Sequences are ``(T, C, H, W)`` or ``(N, T, C, H, W)``.
    """
    _check_same(est_seq, gt_seq)
    if est_seq.shape[time_dim] < 2:
        raise ValueError("temporal statistics need at least 2 frames")
    return (temporal_variance(est_seq, time_dim) - temporal_variance(gt_seq, time_dim)).abs().mean()


def sequence_static_loss(est_seq: torch.Tensor, gt_seq: torch.Tensor, alpha: float = 100.0) -> torch.Tensor:
    """Static temporal loss averaged over consecutive pairs; masks come from ground truth.

    Sequences are ``(..., T, 3, H, W)``.
    """
    _check_same(est_seq, gt_seq)
    T = est_seq.shape[-4]
    if T < 2:
        raise ValueError("static loss needs at least 2 frames")
    terms = []
    for t in range(1, T):
        m = static_mask(gt_seq[..., t, :, :, :], gt_seq[..., t - 1, :, :, :], alpha)
        terms.append(static_temporal_loss(est_seq[..., t, :, :, :], est_seq[..., t - 1, :, :, :], m))
    return torch.stack(terms).mean()


TERMS = ("L_E", "L_A", "L_G", "L_Td", "L_Ts")


def combined_loss(weights: LossWeights, terms: dict[str, torch.Tensor | float]):
    """``w_E L_E + w_A L_A + w_G L_G + w_T (L_Td + L_Ts)``; absent terms count as 0."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    for name, val in terms.items():
        v = val.detach() if isinstance(val, torch.Tensor) else torch.tensor(float(val))
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"loss term {name} is not finite ({float(v)})")
    get = lambda k: terms.get(k, 0.0)  # noqa: E731
    return (weights.w_E * get("L_E") + weights.w_A * get("L_A") + weights.w_G * get("L_G")
            + weights.w_T * (get("L_Td") + get("L_Ts")))
