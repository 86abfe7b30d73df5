"""Video discriminator over a whole T-frame stream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DiscriminatorConfig:
    blocks: int = 5
    base_filters: int = 64
    leaky_slope: float = 0.2
    dense_width: int = 1024
    T: int = 10
    input_size: int = 256   # HR crop side the dense head is sized for
    kernel: int = 3

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.T < 1 or self.base_filters < 1 or self.dense_width < 1:
            raise ValueError("T, base_filters and dense_width must be positive")
        if self.input_size % (2 ** self.blocks):
            raise ValueError(f"input_size {self.input_size} not divisible by 2^{self.blocks}")

    def channels(self, i: int) -> int:
        return min(self.base_filters * 2 ** i, 8 * self.base_filters)

    @property
    def final_spatial(self) -> int:
        return self.input_size // 2 ** self.blocks


class Discriminator(nn.Module):
    """Strided conv blocks (BN on all but the first, leaky ReLU), then two dense layers.

    The ``T`` frames are stacked on channels, so the decision depends on their order.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = 3 * cfg.T
        for i in range(cfg.blocks):
            c_out = cfg.channels(i)
            layers.append(nn.Conv2d(c_in, c_out, cfg.kernel, stride=2, padding=cfg.kernel // 2))
            if i > 0:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.LeakyReLU(cfg.leaky_slope))
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.fc1 = nn.Linear(c_in * cfg.final_spatial ** 2, cfg.dense_width)
        self.fc2 = nn.Linear(cfg.dense_width, 1)

    def logits(self, frames: torch.Tensor) -> torch.Tensor:
        n, t, c, h, w = frames.shape
        x = self.features(frames.reshape(n, t * c, h, w))
        x = F.leaky_relu(self.fc1(x.flatten(1)), self.cfg.leaky_slope)
        return self.fc2(x).squeeze(1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(frames))


def discriminator_param_count(cfg: DiscriminatorConfig) -> int:
    k2 = cfg.kernel ** 2
    total = 0
    c_in = 3 * cfg.T
    for i in range(cfg.blocks):
        c_out = cfg.channels(i)
        total += c_in * c_out * k2 + c_out
        if i > 0:
            total += 2 * c_out
        c_in = c_out
    flat = c_in * cfg.final_spatial ** 2
    total += flat * cfg.dense_width + cfg.dense_width
    total += cfg.dense_width + 1
    return total


def build_discriminator(cfg: DiscriminatorConfig, rng: int | np.random.Generator = 0) -> Discriminator:
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(cfg)


def discriminate(d: Discriminator, frames: torch.Tensor) -> torch.Tensor:
    """Probability that each ``(N, T, 3, H, W)`` stream is real, shape ``(N,)``."""
    if frames.dim() == 4:
        frames = frames.unsqueeze(0)
    n, t, c, h, w = frames.shape
    cfg = d.cfg
    if t != cfg.T:
        raise ValueError(f"discriminator expects {cfg.T} frames, got {t}")
    if c != 3:
        raise ValueError(f"frames must have 3 channels, got {c}")
    if h != cfg.input_size or w != cfg.input_size:
        raise ValueError(f"discriminator built for {cfg.input_size}x{cfg.input_size} frames, got {h}x{w}")
    return d(frames)
