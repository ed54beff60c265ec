"""Command-line entry point: ``metadrop {train,eval,attack,boundary,selftest}``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import runner, selftest
from .config import ConfigError, load_config, output_dir
from .eval import NORMS
from .metalearn import NumericalAbort

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("metadrop")


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def _pair(text: str) -> tuple:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated class indices, got {text!r}") from None
    return a, b


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (INI)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")

    p = argparse.ArgumentParser(prog="metadrop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="meta-train and write curve + checkpoints")
    ev = sub.add_parser("eval", parents=[common, ckpt], help="meta-test a checkpoint")
    ev.add_argument("--episodes", type=int)
    at = sub.add_parser("attack", parents=[common, ckpt], help="PGD robustness over an eps grid")
    at.add_argument("--norm", choices=NORMS)
    at.add_argument("--eps-grid", type=_float_list)
    at.add_argument("--episodes", type=int)
    bd = sub.add_parser("boundary", parents=[common, ckpt], help="export a decision-boundary projection")
    bd.add_argument("--episode", "--episode-seed", dest="episode", type=int, default=0,
                    help="test-episode index")
    bd.add_argument("--class-pair", type=_pair, default=(0, 1))
    sub.add_parser("selftest", help="run the built-in invariant suite")
    return p


def _resolve_config(args, checkpoint: bool):
    """Config from ``--config`` or, for checkpoint commands, the one stored in the checkpoint."""
    params = meta = None
    if args.config:
        cfg = load_config(args.config)
    elif not checkpoint:
        raise ConfigError("config", "--config is required")
    else:
        cfg = None
    if checkpoint:
        if not os.path.isfile(args.checkpoint):
            raise ConfigError("checkpoint", f"file {args.checkpoint!r} not found")
        stored, params, meta, _ = runner.load_run(args.checkpoint)
        cfg = cfg or stored
    if args.seed is not None:
        cfg = cfg.with_updates(seed=args.seed).with_updates("meta", seed=args.seed)
    return cfg, params, meta


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "selftest":
        return EXIT_OK if selftest.run() else EXIT_FAIL
    try:
        cfg, params, _ = _resolve_config(args, checkpoint=args.command != "train")
        if getattr(args, "episodes", None) is not None:
            section = "attack" if args.command == "attack" else "eval"
            cfg = cfg.with_updates(section, episodes=args.episodes)
        if args.command == "attack":
            updates = {}
            if args.norm:
                updates["norm"] = args.norm
            if args.eps_grid is not None:
                updates["eps_grid"] = args.eps_grid
            if updates:
                cfg = cfg.with_updates("attack", **updates)
        out = output_dir(cfg, args.out)
        threads = max(1, args.threads)

        if args.command == "train":
            result = runner.train(cfg, out, threads=threads, log=log.info)
            print(f"wrote {out / result.checkpoints[-1]} and {out / 'train_curve.csv'} "
                  f"(config_hash={cfg.hash()} seed={cfg.seed})")
        elif args.command == "eval":
            m = runner.evaluate(cfg, params, out, threads=threads)
            print(f"accuracy {m['mean_accuracy']:.4f} +- {m['halfwidth']:.4f} over {m['episodes']} episodes "
                  f"(config_hash={m['config_hash']} seed={m['seed']})")
        elif args.command == "attack":
            for row in runner.attack(cfg, params, out=out):
                print(f"{row['norm']} eps={row['eps']:g}: accuracy {row['accuracy']:.4f} +- {row['halfwidth']:.4f}")
        elif args.command == "boundary":
            proj, rows = runner.boundary(cfg, params, args.episode, args.class_pair, out=out)
            print(f"wrote {len(rows)} points, c_x_db={proj.cx_db:.6f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
