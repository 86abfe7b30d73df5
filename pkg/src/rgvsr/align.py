"""Motion compensation: multi-coordinate flow estimation and previous-frame warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .resample import FlowStack, multi_warp

# near-zero head: offsets start ~1e-3 px, weights ~uniform
HEAD_INIT_SCALE = 1e-3
# logit assigned to coordinates that must carry exactly zero weight
ZERO_WEIGHT_LOGIT = -1e4


@dataclass(frozen=True)
class AlignNetConfig:
    n: int = 5
    res_blocks: int = 10
    filters: int = 64
    kernel: int = 3
    scale: int = 4

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.res_blocks < 1:
            raise ValueError(f"res_blocks must be >= 1, got {self.res_blocks}")
        if self.filters < 1 or self.scale < 1:
            raise ValueError("filters and scale must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd size, got {self.kernel}")


@dataclass
class AlignmentField:
    flow: FlowStack          # HR resolution, weights softmax-normalised
    features: torch.Tensor   # (N, filters, h, w) at LR resolution

    def detach(self) -> "AlignmentField":
        return AlignmentField(self.flow.detach(), self.features.detach())


class ResidualBlock(nn.Module):
    """conv -> ReLU -> conv with an identity skip, no normalisation."""

    def __init__(self, channels: int, kernel: int = 3, res_scale: float = 1.0):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel, padding=pad)
        self.conv2 = nn.Conv2d(channels, channels, kernel, padding=pad)
        if res_scale != 1.0:
            with torch.no_grad():
                self.conv2.weight.mul_(res_scale)
                self.conv2.bias.mul_(res_scale)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class AlignNet(nn.Module):
    """Estimates ``n`` (u, v, weight-logit) triples per pixel from two LR frames.

    Head channels are ordered ``[u_1..u_n, v_1..v_n, logit_1..logit_n]``.
    """

    def __init__(self, cfg: AlignNetConfig):
        super().__init__()
        self.cfg = cfg
        pad = cfg.kernel // 2
        self.conv_in = nn.Conv2d(6, cfg.filters, cfg.kernel, padding=pad)
        self.body = nn.Sequential(*[ResidualBlock(cfg.filters, cfg.kernel) for _ in range(cfg.res_blocks)])
        self.head = nn.Conv2d(cfg.filters, 3 * cfg.n, cfg.kernel, padding=pad)
        with torch.no_grad():
            self.head.weight.mul_(HEAD_INIT_SCALE)
            self.head.bias.zero_()

    def forward(self, y_t: torch.Tensor, y_prev: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the raw LR head output ``(N, 3n, h, w)`` and the bridged features."""
        feat = self.body(F.relu(self.conv_in(torch.cat([y_t, y_prev], dim=1))))
        return self.head(feat), feat


def align_param_count(cfg: AlignNetConfig) -> int:
    k2 = cfg.kernel * cfg.kernel
    f = cfg.filters
    conv_in = 6 * f * k2 + f
    blocks = cfg.res_blocks * 2 * (f * f * k2 + f)
    head = f * 3 * cfg.n * k2 + 3 * cfg.n
    return conv_in + blocks + head


def build_align_net(cfg: AlignNetConfig, rng: int | np.random.Generator = 0) -> AlignNet:
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AlignNet(cfg)


def field_from_head(head: torch.Tensor, features: torch.Tensor, n: int, scale: int) -> AlignmentField:
    """Lift LR head maps to an HR FlowStack.

    Offsets are bilinearly upsampled by ``scale`` and multiplied by it (LR pixel
    units to HR pixel units); weight logits are upsampled then softmaxed over
    the ``n`` coordinates.
    """
    up = head if scale == 1 else F.interpolate(head, scale_factor=scale, mode="bilinear", align_corners=False)
    u = up[:, :n] * scale
    v = up[:, n:2 * n] * scale
    w = torch.softmax(up[:, 2 * n:], dim=1)
    return AlignmentField(FlowStack(u, v, w), features)


def estimate_alignment(net: AlignNet, y_t: torch.Tensor, y_prev: torch.Tensor) -> AlignmentField:
    if y_t.shape != y_prev.shape:
        raise ValueError(f"frame shapes differ: {tuple(y_t.shape)} vs {tuple(y_prev.shape)}")
    head, feat = net(y_t, y_prev)
    return field_from_head(head, feat, net.cfg.n, net.cfg.scale)


def warp_previous(x_prev: torch.Tensor, field: AlignmentField) -> torch.Tensor:
    """Warp the previous HR estimate onto the current frame. No clamping."""
    if tuple(x_prev.shape[-2:]) != field.flow.spatial:
        raise ValueError(f"previous frame {tuple(x_prev.shape[-2:])} does not match flow {field.flow.spatial}")
    return multi_warp(x_prev, field.flow)


def _initial_offsets(n: int, shape, gen: torch.Generator, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    # coordinate 0 starts at the identity, the rest on a unit ring, plus small jitter
    u = torch.zeros(shape[0], n, *shape[-2:], dtype=dtype)
    v = torch.zeros_like(u)
    for i in range(1, n):
        ang = 2 * np.pi * (i - 1) / max(n - 1, 1)
        u[:, i] = float(np.cos(ang))
        v[:, i] = float(np.sin(ang))
    u = u + 0.05 * torch.randn(u.shape, generator=gen, dtype=dtype)
    v = v + 0.05 * torch.randn(v.shape, generator=gen, dtype=dtype)
    return u, v


def weights_to_logits(w: torch.Tensor) -> torch.Tensor:
    return torch.where(w > 0, w.clamp_min(1e-300).log(), torch.full_like(w, ZERO_WEIGHT_LOGIT))


def fit_flow_direct(x_prev: torch.Tensor, x_target: torch.Tensor, n: int, steps: int,
                    seed: int = 0, lr: float = 0.05, init: FlowStack | None = None,
                    crop: int = 0) -> FlowStack:
    """Fit raw per-pixel ``(u, v, logit)`` maps by gradient descent on the warp MSE.

    No network involved: this is the direct optimisation used for the
    coordinate-count ablation. ``init`` (weights as probabilities) overrides the
    seeded initialisation; ``crop`` excludes a border band from the objective.
    Adam with a cosine-decayed step size, so the last steps settle rather than
    jitter around the optimum.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if x_prev.shape != x_target.shape:
        raise ValueError(f"frame shapes differ: {tuple(x_prev.shape)} vs {tuple(x_target.shape)}")
    x_prev = x_prev.detach()
    x_target = x_target.detach()
    dtype = x_prev.dtype
    if init is None:
        gen = torch.Generator().manual_seed(seed)
        u, v = _initial_offsets(n, x_prev.shape, gen, dtype)
        logits = torch.zeros_like(u)
    else:
        if init.n != n or init.spatial != tuple(x_prev.shape[-2:]):
            raise ValueError("init FlowStack does not match n or frame size")
        u, v, logits = init.u.clone().to(dtype), init.v.clone().to(dtype), weights_to_logits(init.w.to(dtype))
    params = [p.requires_grad_(True) for p in (u, v, logits)]
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)

    def objective():
        out = multi_warp(x_prev, FlowStack(u, v, torch.softmax(logits, dim=1)))
        diff = out - x_target
        if crop:
            diff = diff[..., crop:-crop, crop:-crop]
        return diff.pow(2).mean()

    for _ in range(steps):
        opt.zero_grad()
        objective().backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        return FlowStack(u.detach(), v.detach(), torch.softmax(logits, dim=1).detach())


def embed_flow(flow: FlowStack, n: int) -> FlowStack:
    """Pad a FlowStack to ``n`` coordinates; the new coordinates get zero weight."""
    if n < flow.n:
        raise ValueError(f"cannot embed n={flow.n} into fewer coordinates ({n})")
    extra = n - flow.n
    pad = torch.zeros(flow.u.shape[0], extra, *flow.spatial, dtype=flow.u.dtype)
    return FlowStack(torch.cat([flow.u, pad], 1), torch.cat([flow.v, pad], 1), torch.cat([flow.w, pad], 1))
