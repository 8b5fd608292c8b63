"""Command-line entry point: ``droppos {pretrain,eval-grid,render,probe}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config, load_datasets, write_resolved
from .errors import ConfigError, FormatError
from .evaluate import accuracy_grid, linear_class_probe, linear_position_probe, render_reconstruction
from .task import DropPosModel
from .train import load_checkpoint, model_from_checkpoint, pretrain

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
RENDER_SWEEP = (0.0, 0.25, 0.5, 0.75)
RENDER_SWEEP_GAMMA_POS = 0.95

log = logging.getLogger("droppos")


def _thread_limit():
    n = os.environ.get("DROPPOS_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _common(p: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. task.gamma=0.5 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output file or directory")
    if checkpoint:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--checkpoint", help="checkpoint written by pretrain")
        g.add_argument("--random-init", action="store_true", help="use a freshly initialized model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="droppos", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("pretrain", help="run DropPos pretraining"), checkpoint=False)

    _common(sub.add_parser("eval-grid", help="position accuracy over the 4x4 (gamma, gamma_pos) grid"))

    p = sub.add_parser("render", help="write position-reconstruction renders as PPM")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="image index in the eval set")
    p.add_argument("--gamma", type=float, default=0.75)
    p.add_argument("--gamma-pos", type=float, default=RENDER_SWEEP_GAMMA_POS)
    p.add_argument("--sweep", action="store_true",
                   help=f"render gamma in {RENDER_SWEEP} at gamma_pos={RENDER_SWEEP_GAMMA_POS}")

    p = sub.add_parser("probe", help="frozen-backbone linear probe")
    _common(p)
    p.add_argument("--kind", choices=("position", "class"), default="position")
    return parser


def _model(args, cfg: RunConfig) -> tuple[DropPosModel, RunConfig]:
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        model = model_from_checkpoint(ck)
        cfg.model = model.cfg
        return model, cfg
    return DropPosModel(cfg.model, seed=cfg.seed), cfg


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    cfg.output_dir = str(out)
    write_resolved(cfg, out)
    train, _ = load_datasets(cfg)
    res = pretrain(cfg.train_config(), cfg.model, train, out_dir=out)
    last = res.metrics[-1] if res.metrics else None
    if last:
        print(f"finished step {int(last['step']) + 1}: loss {float(last['loss']):.4f} "
              f"acc {float(last['acc']):.4f}")
    print(f"checkpoint: {out / 'checkpoint.dpos'}")
    return EXIT_OK


def cmd_eval_grid(args, cfg: RunConfig) -> int:
    model, cfg = _model(args, cfg)
    seed = cfg.eval.seed if args.seed is None else args.seed
    _, ev = load_datasets(cfg)
    grid = accuracy_grid(model, ev, seed, cfg.eval.gammas, cfg.eval.gamma_pos, cfg.eval.n_images)
    out = Path(args.out or Path(cfg.output_dir) / "grid.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.to_csv(out)
    print(f"average position accuracy: {grid.average:.4f}")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    model, cfg = _model(args, cfg)
    seed = cfg.eval.seed if args.seed is None else args.seed
    _, ev = load_datasets(cfg)
    if not 0 <= args.index < len(ev):
        raise ConfigError(f"--index {args.index} outside eval set of {len(ev)} images")
    image = ev.images[args.index]
    if args.sweep:
        out_dir = Path(args.out or Path(cfg.output_dir) / "renders")
        out_dir.mkdir(parents=True, exist_ok=True)
        for g in RENDER_SWEEP:
            path = out_dir / f"render_{args.index}_gamma{g:.2f}.ppm"
            render_reconstruction(model, image, g, RENDER_SWEEP_GAMMA_POS, seed, path, ev.normalize)
            print(f"wrote {path}")
        return EXIT_OK
    path = Path(args.out or Path(cfg.output_dir) / f"render_{args.index}.ppm")
    path.parent.mkdir(parents=True, exist_ok=True)
    render_reconstruction(model, image, args.gamma, args.gamma_pos, seed, path, ev.normalize)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_probe(args, cfg: RunConfig) -> int:
    if args.kind == "class" and cfg.data.source == "synthetic" and not cfg.data.labels:
        raise ConfigError("class probe on synthetic data needs data.labels=true")
    model, cfg = _model(args, cfg)
    seed = cfg.eval.seed if args.seed is None else args.seed
    train, ev = load_datasets(cfg)
    train = train.subset(range(min(cfg.eval.probe_train_images, len(train))))
    if args.kind == "position":
        res = linear_position_probe(model, train, ev, cfg.eval.probe_pe_mask_ratio,
                                    cfg.eval.probe_epochs, cfg.eval.probe_gamma, seed)
    else:
        res = linear_class_probe(model, train, ev, cfg.eval.probe_epochs, seed)
    out = Path(args.out or Path(cfg.output_dir) / f"probe_{args.kind}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    res.to_csv(out)
    print(f"{args.kind} probe accuracy: {res.accuracy:.4f}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "eval-grid": cmd_eval_grid, "render": cmd_render, "probe": cmd_probe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.override)
        if args.command == "pretrain" and args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        with _thread_limit():
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
