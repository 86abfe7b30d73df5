"""``rgvsr`` command line: train, infer, eval, ablate-n and make-toy.

Exit codes: 0 success, 2 usage or configuration error, 3 failure while running.
Every command checks its inputs before writing anything.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import dataseq, metrics, trainer
from .dataseq import SequenceError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

log = logging.getLogger("rgvsr")


class UsageError(Exception):
    pass


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"need at least one positive integer, got {text!r}")
    return vals


def _out_dir(args, sub: str) -> Path:
    return Path(args.out) if args.out else trainer.default_out_root() / sub


def _flow_dirs(root: str | None, dataset) -> dict[str, Path] | None:
    if root is None:
        return None
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"flow directory not found: {root}")
    return {p.name: root / p.name for p in dataset if (root / p.name).is_dir()}


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.input:
        overrides["dataset"] = str(Path(args.input).resolve())
    cfg = trainer.load_config(args.config, overrides)
    if not cfg.dataset:
        raise UsageError("no dataset: set 'dataset' in the config or pass --in MANIFEST")
    dataset = dataseq.read_manifest(cfg.dataset, cfg.scale, cfg.kernel)
    dataseq.validate_dataset(dataset, cfg.T, cfg.crop_hr, cfg.scale)
    out = Path(args.out) if args.out else None
    state, _ = trainer.train(cfg, dataset, out_dir=out, resume=args.checkpoint)
    print(f"trained to iteration {state.iteration}; checkpoint in "
          f"{out or cfg.out_dir or trainer.default_out_root() / 'train'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    if not args.checkpoint:
        raise UsageError("infer needs --checkpoint")
    if not args.input:
        raise UsageError("infer needs --in LR_FRAME_DIR")
    g, a, cfg = trainer.load_models(args.checkpoint)
    src = Path(args.input)
    seq = dataseq.load_sequence(src)
    names = [p.with_suffix(".png").name for p in dataseq.list_frame_files(src)]
    out = _out_dir(args, "infer")
    est = trainer.upscale_sequence(g, a, seq.frames)
    dataseq.write_sequence(est, out, names)
    print(f"wrote {len(names)} frames of {est.shape[-1]}x{est.shape[-2]} to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.input:
        raise UsageError("eval needs --in MANIFEST")
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise trainer.CheckpointError(f"checkpoint not found: {args.checkpoint}")
        upscaler, scale = metrics.model_upscaler(args.checkpoint)
    else:
        scale = args.scale
        upscaler = metrics.bicubic_upscaler(scale)
    dataset = dataseq.read_manifest(args.input, scale)
    flow_dirs = _flow_dirs(args.flows, dataset)
    report = metrics.evaluate_sequences(upscaler, dataset, args.alpha, flow_dirs=flow_dirs,
                                        distance=None)
    out = Path(args.metrics) if args.metrics else _out_dir(args, "eval")
    report.write(out)
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_ablate_n(args) -> int:
    if not args.input:
        raise UsageError("ablate-n needs --in FRAME_DIR (first two frames are used)")
    n_values = _int_list(args.n)
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    seq = dataseq.load_sequence(args.input)
    if len(seq) < 2:
        raise UsageError(f"{args.input}: ablation needs two frames, found {len(seq)}")
    rows = metrics.ablate_n(seq.frames[:2], n_values, args.steps, seed=args.seed or 0)
    out = Path(args.out) if args.out else trainer.default_out_root() / "ablate_n.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_ablation_csv(rows, out)
    for r in rows:
        print(f"n={r.n}: {r.psnr:.3f} dB ({r.source})")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .synthetic import toy_dataset

    if args.size % args.scale:
        raise UsageError(f"--size {args.size} is not divisible by --scale {args.scale}")
    out = _out_dir(args, "toy")
    pairs = toy_dataset(args.sequences, args.length, args.size, args.scale, args.seed or 0,
                        static_background=True if args.static else None)
    entries = []
    for p in pairs:
        hr_dir, lr_dir, flow_dir = out / "hr" / p.name, out / "lr" / p.name, out / "flows" / p.name
        dataseq.write_sequence(p.hr, hr_dir)
        dataseq.write_sequence(p.lr, lr_dir)
        flow_dir.mkdir(parents=True, exist_ok=True)
        for t in range(1, len(p.hr)):
            metrics.write_flow(flow_dir / f"{t:06d}.flo", p.flow[t])
        entries.append((hr_dir, lr_dir))
    dataseq.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(pairs)} sequences to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate-n": cmd_ablate_n,
    "make-toy": cmd_make_toy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgvsr", description="Recurrent video super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=False, checkpoint=False):
        p.add_argument("--in", dest="input", help="input manifest or frame directory")
        p.add_argument("--out", help=f"output location (default under ${trainer.OUT_ROOT_ENV} or ./runs)")
        p.add_argument("--seed", type=int)
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
        if checkpoint:
            p.add_argument("--checkpoint")

    p = sub.add_parser("train", help="pretrain then adversarially train on a manifest")
    common(p, config=True, checkpoint=True)
    p = sub.add_parser("infer", help="upscale a directory of LR frames")
    common(p, checkpoint=True)
    p = sub.add_parser("eval", help="score a checkpoint (or bicubic without one) on a manifest")
    common(p, checkpoint=True)
    p.add_argument("--metrics", help="report directory (defaults to --out)")
    p.add_argument("--flows", help="directory of per-sequence flow folders for the warping error")
    p.add_argument("--scale", type=int, default=4, help="scale for the bicubic baseline")
    p.add_argument("--alpha", type=float, default=100.0)
    p = sub.add_parser("ablate-n", help="warp-error PSNR against the number of coordinates")
    common(p)
    p.add_argument("--n", default="1,2,5")
    p.add_argument("--steps", type=int, default=500)
    p = sub.add_parser("make-toy", help="write the synthetic toy dataset")
    common(p)
    p.add_argument("--sequences", type=int, default=24)
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--static", action="store_true", help="static backgrounds only")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, trainer.ConfigError, trainer.CheckpointError, SequenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
