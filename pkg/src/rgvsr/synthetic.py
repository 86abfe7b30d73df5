"""Procedural toy videos with exact ground-truth motion.

Scenes are rendered analytically (no resampling of earlier frames), so motion
between frames is exact at any sub-pixel velocity. Each scene is a textured
background, optionally panning, under a few sharp-edged textured rectangles
moving at constant velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataseq import FrameSequence, SequencePair, make_lr, quantize


@dataclass
class Texture:
    freqs: np.ndarray    # (3, k) radians per pixel
    dirs: np.ndarray     # (3, k) angle
    phases: np.ndarray   # (3, k)
    base: np.ndarray     # (3,) mean colour
    amp: float

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 8, fmin: float = 0.05, fmax: float = 0.6,
               amp: float = 0.35) -> "Texture":
        return cls(
            freqs=rng.uniform(fmin, fmax, (3, k)),
            dirs=rng.uniform(0, 2 * np.pi, (3, k)),
            phases=rng.uniform(0, 2 * np.pi, (3, k)),
            base=rng.uniform(0.25, 0.75, 3),
            amp=amp,
        )

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        k = self.freqs.shape[1]
        out = np.empty((3, *x.shape))
        for c in range(3):
            acc = np.zeros(x.shape)
            for j in range(k):
                d = self.dirs[c, j]
                acc += np.cos(self.freqs[c, j] * (np.cos(d) * x + np.sin(d) * y) + self.phases[c, j])
            out[c] = self.base[c] + self.amp * acc / np.sqrt(k)
        return np.clip(out, 0.0, 1.0)


@dataclass
class Rect:
    x0: float
    y0: float
    w: float
    h: float
    vx: float
    vy: float
    texture: Texture


@dataclass
class Scene:
    background: Texture
    bg_velocity: tuple[float, float]
    rects: list[Rect]

    def render(self, t: int, height: int, width: int, supersample: int = 2) -> tuple[np.ndarray, np.ndarray]:
        """Frame ``t`` as ``(3, H, W)`` plus its backward flow ``(2, H, W)`` onto frame ``t-1``."""
        ss = supersample
        off = (np.arange(ss) + 0.5) / ss - 0.5
        ys = (np.arange(height)[:, None] + off[None, :]).reshape(-1)
        xs = (np.arange(width)[:, None] + off[None, :]).reshape(-1)
        y, x = np.meshgrid(ys, xs, indexing="ij")
        bvx, bvy = self.bg_velocity
        img = self.background(x + bvx * t, y + bvy * t)
        yc, xc = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
        flow = np.empty((2, height, width))
        # background samples (x + b t): content moves by -b, so frame t-1 sits at x + b
        flow[0] = bvx
        flow[1] = bvy
        for r in self.rects:
            left, top = r.x0 + r.vx * t, r.y0 + r.vy * t
            inside = (x >= left) & (x < left + r.w) & (y >= top) & (y < top + r.h)
            if inside.any():
                tex = r.texture(x - left, y - top)
                img = np.where(inside[None], tex, img)
            centre = (xc >= left) & (xc < left + r.w) & (yc >= top) & (yc < top + r.h)
            flow[0][centre] = -r.vx
            flow[1][centre] = -r.vy
        img = img.reshape(3, height, ss, width, ss).mean(axis=(2, 4))
        return img, flow


def random_scene(rng: np.random.Generator, height: int, width: int, static_background: bool | None = None,
                 max_speed: float = 2.0, n_rects: tuple[int, int] = (1, 3)) -> Scene:
    if static_background is None:
        static_background = bool(rng.random() < 0.5)
    bg = Texture.random(rng, fmax=0.5)
    bg_vel = (0.0, 0.0) if static_background else tuple(rng.uniform(-max_speed, max_speed, 2))
    rects = []
    for _ in range(int(rng.integers(n_rects[0], n_rects[1] + 1))):
        w = rng.uniform(0.15, 0.4) * width
        h = rng.uniform(0.15, 0.4) * height
        flat = rng.random() < 0.4
        tex = Texture.random(rng, k=4, fmin=0.2, fmax=1.2, amp=0.0 if flat else 0.3)
        rects.append(Rect(
            x0=rng.uniform(0, width - w), y0=rng.uniform(0, height - h), w=w, h=h,
            vx=rng.uniform(-max_speed, max_speed), vy=rng.uniform(-max_speed, max_speed), texture=tex,
        ))
    return Scene(bg, bg_vel, rects)


def render_sequence(scene: Scene, length: int, height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    frames, flows = [], []
    for t in range(length):
        img, flow = scene.render(t, height, width)
        frames.append(img)
        flows.append(flow)
    frames = quantize(torch.tensor(np.stack(frames), dtype=torch.float32))
    return frames, torch.tensor(np.stack(flows), dtype=torch.float32)


def toy_dataset(n_sequences: int, length: int, size: int, scale: int = 4, seed: int = 0,
                static_background: bool | None = None, kernel: str = "bicubic",
                prefix: str = "toy") -> list[SequencePair]:
    """``n_sequences`` square toy clips with HR frames, synthesised LR and GT flow.

    HR frames are 8-bit quantised so that writing them to disk is lossless.
    """
    if size % scale:
        raise ValueError(f"size {size} not divisible by scale {scale}")
    pairs = []
    for k in range(n_sequences):
        rng = np.random.default_rng([seed, k])
        scene = random_scene(rng, size, size, static_background=static_background)
        frames, flow = render_sequence(scene, length, size, size)
        hr = FrameSequence(frames, name=f"{prefix}{k:03d}")
        pairs.append(SequencePair(hr, make_lr(hr, scale, kernel), flow))
    return pairs


def warp_pair(size: int = 48, translation: float = 1.0, deformation: float = 0.0, seed: int = 0,
              fmax: float = 0.9, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Two frames where ``target(x, y) = prev(x + dx, y + dy)`` exactly.

    ``dx = translation + deformation * sin(.)`` and ``dy = deformation * cos(.)``
    are smooth non-rigid displacements; both frames are rendered from the same
    analytic texture. Returns ``(prev, target)`` each ``(1, 3, size, size)``.
    """
    tex = Texture.random(np.random.default_rng(seed), k=12, fmin=0.1, fmax=fmax, amp=0.4)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = translation + deformation * np.sin(2 * np.pi * y / size * 1.5)
    dy = deformation * np.cos(2 * np.pi * x / size * 1.3)
    prev = torch.tensor(tex(x, y), dtype=dtype)[None]
    target = torch.tensor(tex(x + dx, y + dy), dtype=dtype)[None]
    return prev, target
