"""BPTT training: L1 pretraining, adversarial phase, checkpoints and resumption."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch.func import functional_call

from . import tensorio
from .align import AlignNet, AlignNetConfig, build_align_net
from .dataseq import ClipBatch, SequencePair, count_clips, sample_clip_batch, validate_dataset
from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator
from .generator import Generator, GeneratorConfig, build_generator, unroll
from .losses import (
    FeatureExtractor,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    combined_loss,
    l1_loss,
    sequence_static_loss,
    temporal_statistics_loss,
    texture_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("iteration", "phase", "L_E", "L_A", "L_G", "L_Td", "L_Ts", "L_c", "L_D",
               "d_real", "d_fake", "wall_time")
SATURATION_THRESHOLD = 1e-6
OUT_ROOT_ENV = "RGVSR_OUT"

# fields that change tensor shapes; a checkpoint only fits a config with the same values
ARCHITECTURE_KEYS = (
    "T", "crop_hr", "scale", "n", "res_blocks", "filters", "align_res_blocks", "align_filters",
    "disc_blocks", "disc_filters", "disc_dense", "fe_widths", "fe_convs",
)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV) or "runs")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = ""   # empty: $RGVSR_OUT/train (or runs/train)
    T: int = 10
    batch: int = 8
    crop_hr: int = 256
    scale: int = 4
    kernel: str = "bicubic"
    n: int = 5
    res_blocks: int = 10
    filters: int = 64
    align_res_blocks: int = 10
    align_filters: int = 64
    disc_blocks: int = 5
    disc_filters: int = 64
    disc_dense: int = 1024
    fe_widths: str = "16,32"
    fe_convs: int = 2
    fe_weights: str = ""
    # negative iteration counts mean "derive from epochs"
    pretrain_iters: int = -1
    pretrain_epochs: float = 2.0
    main_iters: int = -1
    main_epochs: float = 4.0
    learning_rate: float = 1e-4
    seed: int = 0
    w_E: float = 0.01
    w_A: float = 0.005
    w_G: float = 1.0
    w_T: float = 0.1
    alpha: float = 100.0
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.crop_hr % self.scale:
            raise ConfigError(f"crop_hr {self.crop_hr} is not divisible by scale {self.scale}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        try:
            self.fe_width_list
        except ValueError as exc:
            raise ConfigError(f"fe_widths must be comma-separated integers, got {self.fe_widths!r}") from exc
        # build the sub-configs once to surface their validation errors at startup
        try:
            self.generator_config(), self.align_config(), self.discriminator_config(), self.weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def fe_width_list(self) -> list[int]:
        return [int(x) for x in str(self.fe_widths).split(",") if x.strip()]

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_E, self.w_A, self.w_G, self.w_T, self.alpha)

    def generator_config(self) -> GeneratorConfig:
        r = int(round(math.sqrt(self.scale)))
        return GeneratorConfig(self.res_blocks, self.filters, 3, self.scale, r, self.align_filters)

    def align_config(self) -> AlignNetConfig:
        return AlignNetConfig(self.n, self.align_res_blocks, self.align_filters, 3, self.scale)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.disc_blocks, self.disc_filters, 0.2, self.disc_dense, self.T, self.crop_hr)

    def fingerprint(self) -> str:
        arch = {k: getattr(self, k) for k in ARCHITECTURE_KEYS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]

    def iterations_per_epoch(self, dataset: list[SequencePair]) -> int:
        return max(1, math.ceil(count_clips(dataset, self.T) / self.batch))

    def phase_lengths(self, dataset: list[SequencePair]) -> tuple[int, int]:
        per_epoch = self.iterations_per_epoch(dataset)
        pre = self.pretrain_iters if self.pretrain_iters >= 0 else math.ceil(self.pretrain_epochs * per_epoch)
        main = self.main_iters if self.main_iters >= 0 else math.ceil(self.main_epochs * per_epoch)
        return pre, main

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        values = asdict(self)
        values.update(_coerce(overrides))
        return TrainConfig(**values)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(raw: dict[str, str | int | float]) -> dict:
    out = {}
    for key, val in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key}")
        typ = _FIELD_TYPES[key]
        try:
            if typ == "int":
                out[key] = int(val)
            elif typ == "float":
                out[key] = float(val)
            else:
                out[key] = str(val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r} ({typ} expected)") from exc
    return out


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key: {key}")
        values[key] = val
    return values


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Read a flat key-value config, apply overrides, validate. Relative dataset paths resolve against the file."""
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text())
        if values.get("dataset") and not Path(values["dataset"]).is_absolute():
            values["dataset"] = str((path.parent / values["dataset"]).resolve())
    values.update(overrides or {})
    return TrainConfig(**_coerce(values))


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    align: AlignNet
    discriminator: Discriminator
    extractor: FeatureExtractor
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    low_d_fake_iters: int = 0
    frames_generated: int = field(default=0, compare=False)

    def g_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.generator.parameters()) + list(self.align.parameters())


def _make_optimizers(cfg: TrainConfig, g: Generator, a: AlignNet, d: Discriminator):
    opt_g = torch.optim.Adam(list(g.parameters()) + list(a.parameters()), lr=cfg.learning_rate, foreach=False)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.learning_rate, foreach=False)
    return opt_g, opt_d


def _make_extractor(cfg: TrainConfig) -> FeatureExtractor:
    if cfg.fe_weights:
        return FeatureExtractor.from_archive(cfg.fe_weights)
    return FeatureExtractor(cfg.fe_width_list, cfg.fe_convs, seed=cfg.seed + 3)


def build_state(cfg: TrainConfig) -> TrainState:
    """Fresh networks and optimisers; every random draw derives from ``cfg.seed``."""
    g = build_generator(cfg.generator_config(), cfg.seed)
    a = build_align_net(cfg.align_config(), cfg.seed + 1)
    d = build_discriminator(cfg.discriminator_config(), cfg.seed + 2)
    opt_g, opt_d = _make_optimizers(cfg, g, a, d)
    return TrainState(cfg, g, a, d, _make_extractor(cfg), opt_g, opt_d,
                      np.random.default_rng([cfg.seed, 7919]))


def _finite(logs: dict[str, float], where: str):
    bad = [k for k, v in logs.items() if not math.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite loss in {where} at iteration: {', '.join(bad)} ({logs})")


def pretrain_step(state: TrainState, batch: ClipBatch) -> dict[str, float]:
    """One update of generator + align on the mean-over-unroll L1 loss."""
    g, a = state.generator, state.align
    g.train(), a.train()
    lr = batch.lr.to(torch.float32)
    hr = batch.hr.to(torch.float32)
    state.opt_g.zero_grad(set_to_none=True)
    out = unroll(g, a, lr, batch.T, keep_fields=False)
    state.frames_generated += out.estimates.shape[0] * out.estimates.shape[1]
    loss = l1_loss(out.estimates, hr)
    logs = {"L_E": loss.item()}
    _finite(logs, "pretrain_step")
    loss.backward()
    state.opt_g.step()
    state.iteration += 1
    return logs


def discriminator_step(state: TrainState, hr: torch.Tensor, fake: torch.Tensor) -> dict[str, float]:
    """Update D on real streams vs detached, clamped fake streams. G/align untouched."""
    d = state.discriminator
    d.train()
    state.opt_d.zero_grad(set_to_none=True)
    d_real = d(hr)
    d_fake = d(fake.detach().clamp(0, 1))
    loss = adversarial_d_loss(d_real, d_fake)
    logs = {"L_D": loss.item(), "d_real": d_real.mean().item(), "d_fake": d_fake.mean().item()}
    _finite(logs, "discriminator_step")
    loss.backward()
    state.opt_d.step()
    return logs


def generator_terms(state: TrainState, estimates: torch.Tensor, hr: torch.Tensor) -> dict[str, torch.Tensor]:
    """Every loss term for the generator update, each averaged over batch and unroll."""
    b, t = estimates.shape[:2]
    flat_est = estimates.reshape(b * t, *estimates.shape[2:])
    flat_hr = hr.reshape(b * t, *hr.shape[2:])
    d = state.discriminator
    # the G update must leave D bit-identical, so batch-norm statistics update scratch copies
    scratch = {k: v.clone() for k, v in d.named_buffers()}
    d_fake = functional_call(d, {**dict(d.named_parameters()), **scratch}, (estimates.clamp(0, 1),))
    terms = {
        "L_E": l1_loss(estimates, hr),
        "L_A": adversarial_g_loss(d_fake),
        "L_G": texture_loss(state.extractor, flat_est, flat_hr),
    }
    if t >= 2:
        terms["L_Td"] = sequence_static_loss(estimates, hr, state.cfg.alpha)
        terms["L_Ts"] = temporal_statistics_loss(estimates, hr)
    else:
        zero = estimates.new_zeros(())
        terms["L_Td"] = zero
        terms["L_Ts"] = zero
    return terms


def adversarial_step(state: TrainState, batch: ClipBatch) -> dict[str, float]:
    """One D update followed by one G+align update on the weighted objective."""
    g, a, d = state.generator, state.align, state.discriminator
    g.train(), a.train()
    lr = batch.lr.to(torch.float32)
    hr = batch.hr.to(torch.float32)
    out = unroll(g, a, lr, batch.T, keep_fields=False)
    state.frames_generated += out.estimates.shape[0] * out.estimates.shape[1]
    logs = discriminator_step(state, hr, out.estimates)

    state.opt_g.zero_grad(set_to_none=True)
    terms = generator_terms(state, out.estimates, hr)
    total = combined_loss(state.cfg.weights, terms)
    logs.update({k: v.item() for k, v in terms.items()})
    logs["L_c"] = total.item()
    _finite(logs, "adversarial_step")
    total.backward()
    # D received gradients through L_A; it must not move in the G update
    d.zero_grad(set_to_none=True)
    state.opt_g.step()
    state.iteration += 1

    if logs["d_fake"] < SATURATION_THRESHOLD:
        state.low_d_fake_iters += 1
    else:
        state.low_d_fake_iters = 0
    return logs


# ---------------------------------------------------------------- checkpoints


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for idx, st in sorted(opt.state_dict()["state"].items()):
        for key, val in sorted(st.items()):
            out[f"{prefix}.{idx}.{key}"] = val if isinstance(val, torch.Tensor) else torch.tensor(float(val))
    return out


def _load_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]):
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, val in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = val.clone()
    sd["state"] = state
    opt.load_state_dict(sd)


def _module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: torch.nn.Module, tensors: dict[str, torch.Tensor]):
    own = module.state_dict()
    sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    if set(sub) != set(own):
        raise CheckpointError(f"{prefix}: checkpoint tensors do not match the network "
                              f"(missing {sorted(set(own) - set(sub))[:3]}, extra {sorted(set(sub) - set(own))[:3]})")
    for k, v in sub.items():
        if v.shape != own[k].shape:
            raise CheckpointError(f"{prefix}.{k}: shape {tuple(v.shape)} != {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in sub.items()})


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = {}
    tensors.update(_module_tensors("generator", state.generator))
    tensors.update(_module_tensors("align", state.align))
    tensors.update(_module_tensors("discriminator", state.discriminator))
    tensors.update(_module_tensors("extractor", state.extractor))
    tensors.update(_optimizer_tensors("opt_g", state.opt_g))
    tensors.update(_optimizer_tensors("opt_d", state.opt_d))
    meta = {
        "kind": "rgvsr-checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": asdict(state.cfg),
        "fingerprint": state.cfg.fingerprint(),
        "iteration": state.iteration,
        "low_d_fake_iters": state.low_d_fake_iters,
        "rng_state": state.rng.bit_generator.state,
    }
    return tensorio.dumps(tensors, meta)


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        tensors, meta = tensorio.load(path)
    except tensorio.ArchiveError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if meta.get("kind") != "rgvsr-checkpoint":
        raise CheckpointError(f"{path}: not a training checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('checkpoint_version')} "
                              f"unsupported (expected {CHECKPOINT_VERSION})")
    return tensors, meta


def load_checkpoint(path: str | Path, cfg: TrainConfig | None = None, override: bool = False) -> TrainState:
    """Restore a full training state.

    With ``cfg`` given, its fingerprint must match the stored one unless
    ``override`` is set; the networks are always built from the stored
    architecture, while ``cfg`` supplies everything else (loss weights, run
    length, output paths...).
    """
    tensors, meta = read_checkpoint(path)
    stored = TrainConfig(**meta["config"])
    if cfg is None:
        cfg = stored
    elif cfg.fingerprint() != meta["fingerprint"]:
        if not override:
            raise CheckpointError(
                f"{path}: config fingerprint {cfg.fingerprint()} does not match checkpoint "
                f"{meta['fingerprint']} (architecture differs; pass override to force)"
            )
        cfg = TrainConfig(**{**asdict(cfg), **{k: getattr(stored, k) for k in ARCHITECTURE_KEYS}})
    state = build_state(cfg)
    _load_module("generator", state.generator, tensors)
    _load_module("align", state.align, tensors)
    _load_module("discriminator", state.discriminator, tensors)
    _load_module("extractor", state.extractor, tensors)
    _load_optimizer("opt_g", state.opt_g, tensors)
    _load_optimizer("opt_d", state.opt_d, tensors)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = cfg.learning_rate
    state.iteration = int(meta["iteration"])
    state.low_d_fake_iters = int(meta.get("low_d_fake_iters", 0))
    state.rng.bit_generator.state = meta["rng_state"]
    return state


def load_models(path: str | Path) -> tuple[Generator, AlignNet, TrainConfig]:
    """Generator and align net only, for inference; the discriminator is never built."""
    tensors, meta = read_checkpoint(path)
    cfg = TrainConfig(**meta["config"])
    g = Generator(cfg.generator_config())
    a = AlignNet(cfg.align_config())
    _load_module("generator", g, tensors)
    _load_module("align", a, tensors)
    g.eval(), a.eval()
    return g, a, cfg


def upscale_sequence(g: Generator, a: AlignNet, lr_frames: torch.Tensor) -> torch.Tensor:
    """Inference over a whole ``(T, 3, h, w)`` LR sequence; returns raw ``(T, 3, sh, sw)``."""
    g.eval(), a.eval()
    with torch.no_grad():
        out = unroll(g, a, lr_frames.to(torch.float32).unsqueeze(0), keep_fields=False)
    return out.estimates[0]


# ---------------------------------------------------------------- loop


class LossLog:
    """Append-only CSV of per-iteration loss terms."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, row: dict):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return v


def train(cfg: TrainConfig, dataset: list[SequencePair], out_dir: str | Path | None = None,
          resume: str | Path | None = None, stop_at: int | None = None,
          state: TrainState | None = None) -> tuple[TrainState, list[dict]]:
    """Pretraining then adversarial training, with periodic checkpoints and a CSV loss log.

    ``stop_at`` ends the run early at that global iteration (used to split a run
    for resumption). All dataset/config checks happen before the first step.
    """
    validate_dataset(dataset, cfg.T, cfg.crop_hr, cfg.scale)
    out_dir = Path(out_dir or cfg.out_dir or default_out_root() / "train")
    n_pre, n_main = cfg.phase_lengths(dataset)
    total = n_pre + n_main
    if state is None:
        state = load_checkpoint(resume, cfg) if resume else build_state(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(dump_config(cfg))
    loss_log = LossLog(out_dir / "losses.csv")
    per_epoch = cfg.iterations_per_epoch(dataset)
    history = []
    end = total if stop_at is None else min(total, stop_at)
    t0 = time.perf_counter()
    warned = False
    while state.iteration < end:
        batch = sample_clip_batch(dataset, cfg.batch, cfg.T, cfg.crop_hr, state.rng, cfg.scale)
        if state.iteration < n_pre:
            phase = "pretrain"
            logs = pretrain_step(state, batch)
        else:
            phase = "adversarial"
            logs = adversarial_step(state, batch)
            if state.low_d_fake_iters >= per_epoch and not warned:
                log.warning("discriminator saturated: D(fake) < %g for a full epoch (%d iterations)",
                            SATURATION_THRESHOLD, per_epoch)
                warned = True
        row = {"iteration": state.iteration, "phase": phase, **logs, "wall_time": time.perf_counter() - t0}
        history.append(row)
        loss_log.append(row)
        if cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
            save_checkpoint(state, out_dir / f"ckpt_{state.iteration:07d}.rgv")
        if state.iteration % 100 == 0:
            log.info("iter %d/%d %s %s", state.iteration, total, phase,
                     " ".join(f"{k}={v:.4g}" for k, v in logs.items()))
    save_checkpoint(state, out_dir / "last.rgv")
    return state, history
