"""Frame-sequence I/O, LR synthesis and clip-batch sampling.

Frames live in memory as float tensors shaped ``(T, 3, H, W)`` with values in
``[0, 1]``. On disk a sequence is a directory of 8-bit RGB images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}
KERNELS = ("bicubic", "bilinear", "area")


class SequenceError(ValueError):
    """Bad frame directory, manifest or sequence shape."""


@dataclass
class FrameSequence:
    """Ordered frames of one clip, ``frames`` shaped ``(T, 3, H, W)``."""

    frames: torch.Tensor
    frame_rate_hint: float | None = None
    name: str = ""

    def __post_init__(self):
        f = self.frames
        if f.dim() != 4 or f.shape[1] != 3:
            raise SequenceError(f"frames must be (T, 3, H, W), got {tuple(f.shape)}")
        if f.shape[0] < 1:
            raise SequenceError("a sequence needs at least one frame")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.frames.shape[-2:])


@dataclass
class SequencePair:
    hr: FrameSequence
    lr: FrameSequence
    # optional ground-truth backward flow at HR, (T, 2, H, W); entry t maps frame t onto t-1
    flow: torch.Tensor | None = None

    @property
    def name(self) -> str:
        return self.hr.name


@dataclass
class ClipBatch:
    """Aligned HR/LR clips: ``hr`` is ``(B, T, 3, c, c)``, ``lr`` ``(B, T, 3, c/s, c/s)``."""

    hr: torch.Tensor
    lr: torch.Tensor
    scale: int
    # (sequence index, start frame, top, left) in HR pixels, one per clip
    origins: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        b, t = self.hr.shape[:2]
        if self.lr.shape[:2] != (b, t):
            raise SequenceError(f"hr/lr batch or length differ: {tuple(self.hr.shape)} vs {tuple(self.lr.shape)}")
        if (self.hr.shape[-2] != self.scale * self.lr.shape[-2]
                or self.hr.shape[-1] != self.scale * self.lr.shape[-1]):
            raise SequenceError(f"hr dims {tuple(self.hr.shape[-2:])} are not {self.scale}x lr dims "
                                f"{tuple(self.lr.shape[-2:])}")

    @property
    def T(self) -> int:
        return self.hr.shape[1]

    def to(self, dtype: torch.dtype) -> "ClipBatch":
        return ClipBatch(self.hr.to(dtype), self.lr.to(dtype), self.scale, list(self.origins))


def list_frame_files(path: Path) -> list[Path]:
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def read_image(path: str | Path) -> torch.Tensor:
    """One 8-bit image as a ``(3, H, W)`` float tensor in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise SequenceError(f"{path}: unreadable image ({exc})") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` float to ``(H, W, 3)`` uint8; clamps then rounds to nearest."""
    arr = frame.detach().to(torch.float64).clamp(0, 1).mul(255.0).round()
    return arr.to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def quantize(frames: torch.Tensor) -> torch.Tensor:
    """What a float frame becomes after an 8-bit write/read cycle."""
    return frames.clamp(0, 1).mul(255.0).round().div(255.0).to(frames.dtype)


def load_sequence(path: str | Path) -> FrameSequence:
    path = Path(path)
    if not path.is_dir():
        raise SequenceError(f"{path}: not a directory")
    files = list_frame_files(path)
    if not files:
        raise SequenceError(f"{path}: no image files")
    frames = []
    for f in files:
        img = read_image(f)
        if frames and img.shape != frames[0].shape:
            raise SequenceError(
                f"{f}: frame size {tuple(img.shape[1:])} differs from {files[0].name} "
                f"{tuple(frames[0].shape[1:])}"
            )
        frames.append(img)
    return FrameSequence(torch.stack(frames), name=path.name)


def write_sequence(seq: FrameSequence | torch.Tensor, path: str | Path,
                   names: list[str] | None = None) -> list[Path]:
    """Write frames as 8-bit PNGs (``%06d.png`` unless ``names`` given)."""
    frames = seq.frames if isinstance(seq, FrameSequence) else seq
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if names is not None and len(names) != frames.shape[0]:
        raise SequenceError(f"{len(names)} names for {frames.shape[0]} frames")
    written = []
    for t in range(frames.shape[0]):
        name = names[t] if names is not None else f"{t:06d}.png"
        out = path / name
        Image.fromarray(to_uint8(frames[t])).save(out, compress_level=1)
        written.append(out)
    return written


def make_lr(hr: FrameSequence | torch.Tensor, s: int, kernel: str = "bicubic"):
    """Downsample every frame by ``s``.

    ``bicubic`` and ``bilinear`` are antialiased (the kernel is stretched by
    ``s``); ``area`` is a plain box average. Output is clamped to ``[0, 1]``.
    Accepts a FrameSequence or any ``(..., 3, H, W)`` tensor and returns the
    same kind.
    """
    frames = hr.frames if isinstance(hr, FrameSequence) else hr
    h, w = frames.shape[-2:]
    if s < 1 or h % s or w % s:
        raise SequenceError(f"frame dims {h}x{w} are not divisible by scale {s}")
    if kernel not in KERNELS:
        raise SequenceError(f"unknown downsampling kernel {kernel!r}; choose from {KERNELS}")
    lead = frames.shape[:-3]
    flat = frames.reshape(-1, *frames.shape[-3:])
    if s == 1:
        out = flat.clone()
    elif kernel == "area":
        out = F.avg_pool2d(flat, s)
    else:
        # filter the offset from a per-channel reference so constants stay bit-exact
        ref = flat[..., :1, :1]
        out = ref + F.interpolate(flat - ref, size=(h // s, w // s), mode=kernel,
                                  antialias=True, align_corners=False)
    out = out.clamp(0, 1).reshape(*lead, *out.shape[-3:])
    if isinstance(hr, FrameSequence):
        return FrameSequence(out, hr.frame_rate_hint, hr.name)
    return out


def read_manifest(path: str | Path, scale: int, kernel: str = "bicubic") -> list[SequencePair]:
    """Load a dataset manifest.

    One sequence per line: the HR frame directory, optionally followed by a tab
    and the matching LR directory. Missing LR is synthesised with
    :func:`make_lr`. Relative paths resolve against the manifest's directory;
    blank lines and ``#`` comments are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise SequenceError(f"{path}: manifest not found")
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) > 2:
            raise SequenceError(f"{path}:{lineno}: expected 'HR[<TAB>LR]', got {len(parts)} fields")
        hr_dir = (path.parent / parts[0].strip()).resolve()
        hr = load_sequence(hr_dir)
        if len(parts) == 2 and parts[1].strip():
            lr = load_sequence((path.parent / parts[1].strip()).resolve())
            if len(lr) != len(hr):
                raise SequenceError(f"{path}:{lineno}: HR has {len(hr)} frames but LR has {len(lr)}")
            if (hr.size[0] != scale * lr.size[0]) or (hr.size[1] != scale * lr.size[1]):
                raise SequenceError(f"{path}:{lineno}: HR {hr.size} is not {scale}x LR {lr.size}")
        else:
            lr = make_lr(hr, scale, kernel)
        pairs.append(SequencePair(hr, lr))
    if not pairs:
        raise SequenceError(f"{path}: manifest lists no sequences")
    return pairs


def write_manifest(path: str | Path, entries: list[tuple[Path, Path | None]]) -> None:
    path = Path(path)
    lines = []
    for hr, lr in entries:
        hr = Path(hr)
        rel_hr = hr.relative_to(path.parent) if hr.is_relative_to(path.parent) else hr
        if lr is None:
            lines.append(str(rel_hr))
        else:
            lr = Path(lr)
            rel_lr = lr.relative_to(path.parent) if lr.is_relative_to(path.parent) else lr
            lines.append(f"{rel_hr}\t{rel_lr}")
    path.write_text("\n".join(lines) + "\n")


def count_clips(dataset: list[SequencePair], T: int) -> int:
    """Non-overlapping ``T``-frame clips available in the dataset."""
    return sum(len(p.hr) // T for p in dataset)


def validate_dataset(dataset: list[SequencePair], T: int, crop: int, scale: int) -> None:
    if not dataset:
        raise SequenceError("dataset is empty")
    if crop % scale:
        raise SequenceError(f"crop {crop} is not divisible by scale {scale}")
    shortest = min(len(p.hr) for p in dataset)
    if T > shortest:
        raise SequenceError(f"T={T} exceeds the shortest sequence ({shortest} frames)")
    for p in dataset:
        h, w = p.hr.size
        if crop > h or crop > w:
            raise SequenceError(f"crop {crop} exceeds frame size {h}x{w} of sequence {p.name!r}")
        if p.lr.size != (h // scale, w // scale) or h % scale or w % scale:
            raise SequenceError(f"sequence {p.name!r}: LR {p.lr.size} is not HR {p.hr.size} / {scale}")


def sample_clip_batch(dataset: list[SequencePair], batch: int, T: int, crop: int,
                      rng: np.random.Generator | int, scale: int | None = None) -> ClipBatch:
    """Draw ``batch`` independent clips of ``T`` frames with one random crop each.

    Each clip picks a sequence, a start frame and an HR crop offset (aligned to
    the scale) uniformly at random; the same crop applies to all its frames.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if scale is None:
        scale = dataset[0].hr.size[0] // dataset[0].lr.size[0] if dataset else 1
    validate_dataset(dataset, T, crop, scale)
    c_lr = crop // scale
    hrs, lrs, origins = [], [], []
    for _ in range(batch):
        k = int(rng.integers(len(dataset)))
        pair = dataset[k]
        h, w = pair.hr.size
        t0 = int(rng.integers(len(pair.hr) - T + 1))
        top = int(rng.integers((h - crop) // scale + 1)) * scale
        left = int(rng.integers((w - crop) // scale + 1)) * scale
        hrs.append(pair.hr.frames[t0:t0 + T, :, top:top + crop, left:left + crop])
        lt, ll = top // scale, left // scale
        lrs.append(pair.lr.frames[t0:t0 + T, :, lt:lt + c_lr, ll:ll + c_lr])
        origins.append((k, t0, top, left))
    return ClipBatch(torch.stack(hrs), torch.stack(lrs), scale, origins)
