"""Differentiable spatial resampling primitives.

All tensors are NCHW. Coordinates are in pixel units with the origin at the
top-left pixel centre; ``x`` runs along width, ``y`` along height.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class FlowStack:
    """``n`` coordinate offsets per pixel plus their combination weights.

    ``u`` (horizontal), ``v`` (vertical) and ``w`` are each shaped
    ``(N, n, H, W)``. Weights are used as given; normalising them is the
    caller's business.
    """

    u: torch.Tensor
    v: torch.Tensor
    w: torch.Tensor

    def __post_init__(self):
        if self.u.dim() != 4:
            raise ValueError(f"flow maps must be (N, n, H, W), got {tuple(self.u.shape)}")
        if not (self.u.shape == self.v.shape == self.w.shape):
            raise ValueError(
                f"u/v/w shapes differ: {tuple(self.u.shape)}, {tuple(self.v.shape)}, {tuple(self.w.shape)}"
            )
        if self.u.shape[1] < 1:
            raise ValueError("a FlowStack needs at least one coordinate (n >= 1)")

    @property
    def n(self) -> int:
        return self.u.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.u.shape[-2:])

    @classmethod
    def identity(cls, batch: int, n: int, height: int, width: int, dtype=torch.float32) -> "FlowStack":
        zeros = torch.zeros(batch, n, height, width, dtype=dtype)
        return cls(zeros, zeros.clone(), torch.full_like(zeros, 1.0 / n))

    def detach(self) -> "FlowStack":
        return FlowStack(self.u.detach(), self.v.detach(), self.w.detach())


def base_grid(height: int, width: int, dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Integer pixel coordinates ``(x, y)``, each shaped ``(H, W)``."""
    ys = torch.arange(height, dtype=dtype, device=device)
    xs = torch.arange(width, dtype=dtype, device=device)
    y, x = torch.meshgrid(ys, xs, indexing="ij")
    return x, y


def _corners(coord: torch.Tensor, size: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    # clamp-to-edge, then split into integer base index and fractional part
    c = coord.clamp(0, size - 1)
    if size == 1:
        i0 = torch.zeros_like(c, dtype=torch.long)
        return i0, i0, c - c.detach()
    base = c.detach().floor().clamp(max=size - 2)
    frac = c - base
    i0 = base.long()
    return i0, i0 + 1, frac


def bilinear_sample(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` at real-valued positions with bilinear interpolation.

    Args:
        image: ``(N, C, H, W)`` source.
        x, y: ``(N, Ho, Wo)`` sampling positions in source pixel units. Positions
            outside the image are clamped to the border.

    Returns:
        ``(N, C, Ho, Wo)``; differentiable in ``image``, ``x`` and ``y``.
    """
    if x.shape != y.shape:
        raise ValueError(f"coordinate maps differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 3 or x.shape[0] != image.shape[0]:
        raise ValueError(f"coordinate maps must be (N, Ho, Wo) with N={image.shape[0]}, got {tuple(x.shape)}")
    n, c, h, w = image.shape
    x0, x1, fx = _corners(x, w)
    y0, y1, fy = _corners(y, h)
    flat = image.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, -1).expand(n, c, -1)
        return flat.gather(2, idx).reshape(n, c, *x.shape[1:])

    fx = fx.unsqueeze(1)
    fy = fy.unsqueeze(1)
    top = gather(y0, x0) * (1 - fx) + gather(y0, x1) * fx
    bottom = gather(y1, x0) * (1 - fx) + gather(y1, x1) * fx
    return top * (1 - fy) + bottom * fy


def flow_warp(image: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Classic single-flow backward warp: ``out(x, y) = image(x + u, y + v)``.

    ``u`` and ``v`` are ``(N, H, W)``.
    """
    gx, gy = base_grid(u.shape[-2], u.shape[-1], dtype=u.dtype, device=u.device)
    return bilinear_sample(image, gx + u, gy + v)


def multi_warp(image: torch.Tensor, flow: FlowStack) -> torch.Tensor:
    """Weighted sum of ``n`` bilinear warps of the same image.

    ``out = sum_i w_i * image(x + u_i, y + v_i)``, with each weight map
    broadcast across channels.
    """
    if flow.spatial != tuple(image.shape[-2:]):
        raise ValueError(f"flow dims {flow.spatial} do not match image dims {tuple(image.shape[-2:])}")
    if flow.u.shape[0] != image.shape[0]:
        raise ValueError(f"flow batch {flow.u.shape[0]} != image batch {image.shape[0]}")
    out = None
    for i in range(flow.n):
        term = flow.w[:, i:i + 1] * flow_warp(image, flow.u[:, i], flow.v[:, i])
        out = term if out is None else out + term
    return out


def space_to_depth(x: torch.Tensor, s: int) -> torch.Tensor:
    """Fold each ``s x s`` block into channels.

    Output channel ``(dy * s + dx) * C + c`` holds input ``(c, y*s + dy, x*s + dx)``:
    row-major within the block, channel fastest.
    """
    n, c, h, w = x.shape
    if s < 1 or h % s or w % s:
        raise ValueError(f"spatial dims {h}x{w} not divisible by block size {s}")
    t = x.reshape(n, c, h // s, s, w // s, s)
    t = t.permute(0, 3, 5, 1, 2, 4)
    return t.reshape(n, s * s * c, h // s, w // s)


def depth_to_space(x: torch.Tensor, s: int) -> torch.Tensor:
    """Exact inverse of :func:`space_to_depth`."""
    n, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise ValueError(f"channel count {cs} not divisible by {s}^2")
    c = cs // (s * s)
    t = x.reshape(n, s, s, c, h, w)
    t = t.permute(0, 3, 4, 1, 5, 2)
    return t.reshape(n, c, h * s, w * s)


def nn_upsample(x: torch.Tensor, r: int) -> torch.Tensor:
    """Nearest-neighbour upsampling: every pixel becomes an ``r x r`` block."""
    if r < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {r}")
    if r == 1:
        return x
    return x.repeat_interleave(r, dim=-2).repeat_interleave(r, dim=-1)
