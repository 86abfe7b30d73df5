"""Frame-recurrent generator and the BPTT unroll."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .align import AlignNet, AlignmentField, ResidualBlock, estimate_alignment, warp_previous
from .resample import nn_upsample, space_to_depth

OUTPUT_INIT_SCALE = 1e-2
RESIDUAL_INIT_SCALE = 0.1


@dataclass(frozen=True)
class GeneratorConfig:
    res_blocks: int = 10
    filters: int = 64
    kernel: int = 3
    scale: int = 4
    intermediate_step: int = 2
    motion_feature_channels: int = 64

    def __post_init__(self):
        if self.res_blocks < 1:
            raise ValueError(f"res_blocks must be >= 1, got {self.res_blocks}")
        if self.intermediate_step < 1 or self.intermediate_step ** 2 != self.scale:
            raise ValueError(
                f"two-stage upscaling needs scale == intermediate_step**2, got "
                f"scale={self.scale}, intermediate_step={self.intermediate_step}"
            )
        if self.filters < 1 or self.motion_feature_channels < 0:
            raise ValueError("filters must be positive and motion_feature_channels non-negative")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd size, got {self.kernel}")

    @property
    def in_channels(self) -> int:
        return 3 + 3 * self.scale ** 2 + self.motion_feature_channels


class UpscaleStage(nn.Module):
    """nearest-neighbour x r -> conv -> ReLU"""

    def __init__(self, channels: int, r: int, kernel: int):
        super().__init__()
        self.r = r
        self.conv = nn.Conv2d(channels, channels, kernel, padding=kernel // 2)

    def forward(self, x):
        return F.relu(self.conv(nn_upsample(x, self.r)))


class Generator(nn.Module):
    """ResNet generator in LR space with a nearest-neighbour upscaling tail.

    Input is ``[Y_t, space_to_depth(warped previous estimate), motion features]``
    stacked on channels. The output adds ``nn_upsample(Y_t, s)`` so the network
    only learns a residual. No batch normalisation anywhere.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.kernel
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.filters, k, padding=k // 2)
        self.body = nn.Sequential(*[
            ResidualBlock(cfg.filters, k, res_scale=RESIDUAL_INIT_SCALE) for _ in range(cfg.res_blocks)
        ])
        self.upscale = nn.Sequential(
            UpscaleStage(cfg.filters, cfg.intermediate_step, k),
            UpscaleStage(cfg.filters, cfg.intermediate_step, k),
        )
        self.conv_out = nn.Conv2d(cfg.filters, 3, k, padding=k // 2)
        with torch.no_grad():
            self.conv_out.weight.mul_(OUTPUT_INIT_SCALE)
            self.conv_out.bias.zero_()

    def forward(self, y_t, warped_prev, motion_features):
        s = self.cfg.scale
        parts = [y_t, space_to_depth(warped_prev, s)]
        if self.cfg.motion_feature_channels:
            parts.append(motion_features)
        x = F.relu(self.conv_in(torch.cat(parts, dim=1)))
        x = self.body(x)
        x = self.conv_out(self.upscale(x))
        return x + nn_upsample(y_t, s)


def generator_param_count(cfg: GeneratorConfig) -> int:
    k2 = cfg.kernel ** 2
    f = cfg.filters
    conv_in = cfg.in_channels * f * k2 + f
    blocks = cfg.res_blocks * 2 * (f * f * k2 + f)
    upscale = 2 * (f * f * k2 + f)
    conv_out = f * 3 * k2 + 3
    return conv_in + blocks + upscale + conv_out


def build_generator(cfg: GeneratorConfig, rng: int | np.random.Generator = 0) -> Generator:
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(cfg)


def generate_frame(g: Generator, y_t: torch.Tensor, warped_prev: torch.Tensor,
                   motion_features: torch.Tensor | None) -> torch.Tensor:
    s = g.cfg.scale
    n, c, h, w = y_t.shape
    if c != 3:
        raise ValueError(f"LR frame must have 3 channels, got {c}")
    if warped_prev.shape != (n, 3, s * h, s * w):
        raise ValueError(f"warped previous frame {tuple(warped_prev.shape)} is not {s}x LR {tuple(y_t.shape)}")
    if g.cfg.motion_feature_channels:
        if motion_features is None or motion_features.shape != (n, g.cfg.motion_feature_channels, h, w):
            got = None if motion_features is None else tuple(motion_features.shape)
            raise ValueError(f"motion features {got} do not match "
                             f"({n}, {g.cfg.motion_feature_channels}, {h}, {w})")
    return g(y_t, warped_prev, motion_features)


@dataclass
class UnrollResult:
    estimates: torch.Tensor       # (N, T, 3, sH, sW)
    warped_prevs: torch.Tensor    # (N, T, 3, sH, sW)
    fields: list[AlignmentField]

    @property
    def T(self) -> int:
        return self.estimates.shape[1]


def unroll(g: Generator, a: AlignNet, lr_seq: torch.Tensor, T: int | None = None,
           keep_fields: bool = True) -> UnrollResult:
    """Run the recurrence over the first ``T`` frames of ``lr_seq`` ``(N, L, 3, h, w)``.

    Step 0 aligns the first frame with itself and warps an all-black previous
    estimate. Every later step aligns ``Y_t`` against ``Y_{t-1}`` and warps the
    previous estimate without detaching it, so gradients reach every step.
    """
    if lr_seq.dim() == 4:
        lr_seq = lr_seq.unsqueeze(0)
    n, length, _, h, w = lr_seq.shape
    T = length if T is None else T
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if length < T:
        raise ValueError(f"sequence has {length} frames, fewer than T={T}")
    if a.cfg.scale != g.cfg.scale:
        raise ValueError(f"align scale {a.cfg.scale} != generator scale {g.cfg.scale}")
    s = g.cfg.scale
    prev = lr_seq.new_zeros(n, 3, s * h, s * w)
    estimates, warped, fields = [], [], []
    for t in range(T):
        y_t = lr_seq[:, t]
        y_prev = lr_seq[:, t - 1] if t > 0 else y_t
        field = estimate_alignment(a, y_t, y_prev)
        warped_prev = warp_previous(prev, field)
        prev = generate_frame(g, y_t, warped_prev, field.features)
        estimates.append(prev)
        warped.append(warped_prev)
        if keep_fields:
            fields.append(field)
    return UnrollResult(torch.stack(estimates, 1), torch.stack(warped, 1), fields)
