"""spotkit command line: data generation, training, evaluation, diagnostics."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff.io import IntegrityError
from .config import ConfigError, load_kv
from .encoder import NumericalError
from .scenes import SceneGenerationError, SceneSpec, generate_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cmd_gen_data(args) -> int:
    spec = load_kv(args.spec, SceneSpec) if args.spec else SceneSpec()
    if args.count < 1:
        raise UsageError("--count must be positive")
    path = write_dataset(generate_dataset(spec, args.count, args.seed), args.out)
    print(f"wrote {args.count} scenes to {path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .training import TrainConfig, train_from_config

    cfg = load_kv(args.config, TrainConfig)
    ckpt = train_from_config(cfg, args.out)
    print(f"stage {cfg.stage}: {ckpt.step} steps, checkpoint at {args.out}")
    return EXIT_OK


def _load(args):
    from .training import load_checkpoint

    return load_checkpoint(args.ckpt).build_model(), read_dataset(args.data)


def _cmd_eval(args) -> int:
    from .metrics import evaluate_model

    model, data = _load(args)
    report = evaluate_model(model, data, args.source, eval_seed=args.seed)
    text = report.to_json()
    if args.json:
        Path(args.json).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_grad_map(args) -> int:
    from .diagnostics import grad_norm_map

    model, data = _load(args)
    if args.limit:
        data = data.subset(0, args.limit)
    gmap = grad_norm_map(model, data, args.mode, seed=args.seed)
    Path(args.out).write_text(gmap.to_json() + "\n")
    print(f"mode={gmap.mode} samples={gmap.samples} cv={gmap.cv():.4f}")
    return EXIT_OK


def _cmd_render(args) -> int:
    from .diagnostics import render_masks
    from .metrics import masks_from_attention

    model, data = _load(args)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} out of range for {len(data)} scenes")
    spec = data.spec
    i = args.index
    noise = model.slot_noise(np.random.default_rng([args.seed, 4]), 1)
    attn = model.masks(data.patches[i:i + 1], data.targets[i:i + 1], args.source, noise)
    labels = masks_from_attention(attn, spec.grid, spec.grid, spec.image_size, spec.image_size)[0]
    render_masks(data.samples[i].image, labels, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(full=args.full) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spotkit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a sprite dataset")
    g.add_argument("--spec", help="scene spec file (key = value); defaults if omitted")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="run stage 1 or stage 2 from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="segmentation metrics of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--source", choices=["decoder", "slot", "max", "ens"], default="decoder")
    e.add_argument("--json", help="also write the report here")
    e.add_argument("--seed", type=int, default=0, help="slot-noise seed")
    e.set_defaults(fn=_cmd_eval)

    m = sub.add_parser("grad-map", help="per-position gradient norms w.r.t. the slots")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--mode", choices=["default", "random"], default="default")
    m.add_argument("--out", required=True)
    m.add_argument("--limit", type=int, default=0, help="use only the first N scenes")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=_cmd_grad_map)

    r = sub.add_parser("render", help="write a mask overlay PNG")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--source", choices=["decoder", "slot"], default="decoder")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=_cmd_render)

    s = sub.add_parser("selftest", help="run the oracle and invariant suite")
    s.add_argument("--full", action="store_true", help="include the training checks (minutes)")
    s.set_defaults(fn=_cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spotkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"spotkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, NumericalError, SceneGenerationError, OSError, KeyError, RuntimeError) as exc:
        print(f"spotkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
