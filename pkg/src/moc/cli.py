"""Command line entry point.

Examples::

    moc --task reach --variant moc --seed 0 --steps 200000 --outdir out/
    moc --task push --variant all --seeds 0,1,2 --outdir out/ --plot
    moc --aggregate-only --outdir out/ --plot
    moc --task push --pretrain-out pre/ --set pretrain_episodes=20
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import ConfigError, load_config, parse_value
from .harness import aggregate, emit_plots, format_table, run_matrix
from .trainer import pretrain

log = logging.getLogger("moc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moc", description="Multi-objective curricula: bilevel training and ablation harness.")
    p.add_argument("--task", help="reach or push")
    p.add_argument("--variant", help="a variant name or 'all'")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", help="comma separated, e.g. 0,1,2")
    p.add_argument("--steps", type=int, help="total env steps per run")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--outdir")
    p.add_argument("--pretrain-from", help="checkpoint directory to warm-start the hyper-network and memory")
    p.add_argument("--pretrain-out", help="pretrain on the other task and save a checkpoint here, then exit")
    p.add_argument("--plot", action="store_true", help="render learning curves and visitation heatmaps")
    p.add_argument("--dump-trajectories", action="store_true", help="write trajectories.jsonl per run")
    p.add_argument("--aggregate-only", action="store_true", help="summarise an existing outdir without training")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        over[key.strip()] = parse_value(key.strip(), value)
    flag_map = {"task": args.task, "variant": args.variant, "total_env_steps": args.steps, "outdir": args.outdir,
                "pretrain_from": args.pretrain_from}
    over.update({k: v for k, v in flag_map.items() if v is not None})
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    elif args.seeds is not None:
        over["seeds"] = parse_value("seeds", args.seeds)
    if args.dump_trajectories:
        over["dump_trajectories"] = True
    return over


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, train and aggregate. Exit codes: 0 ok, 1 runtime failure, 2 usage or config error."""
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 2
    except SystemExit as exit_:  # --help
        return int(exit_.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    try:
        if args.pretrain_out:
            path = pretrain(cfg, cfg.seeds[0], args.pretrain_out)
            print(f"pretrained checkpoint written to {path}")
            return 0
        failed = []
        if not args.aggregate_only:
            _, failed = run_matrix(cfg)
        rows, missing = aggregate(cfg.outdir)
        print(format_table(rows, missing))
        if args.plot:
            emit_plots(cfg.outdir)
    except Exception:  # noqa: BLE001
        log.exception("run failed")
        return 1
    if failed:
        for variant, seed, err in failed:
            print(f"run {variant}/{seed} failed: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
