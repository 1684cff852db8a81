"""Command line: ``influence-loo {train,validate,eigen,report}``.

Exit codes: 0 ok, 2 configuration error, 3 training divergence,
4 incomplete run artifacts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .runner import create_run, load_run, missing_artifacts, run_stage, write_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INCOMPLETE = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="influence-loo", description="Influence estimates validated against leave-one-out retraining.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("train", "train every sweep cell and repetition"),
        ("validate", "influence estimates vs leave-one-out retraining"),
        ("eigen", "top Hessian eigenvalue per cell and repetition"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="experiment INI file")
        s.add_argument("--run", type=Path, help="existing run directory to continue (reuses its checkpoints)")
        s.add_argument("--out", type=Path, help="parent directory for new runs (overrides experiment.output)")
        s.add_argument("--workers", type=int, help="parallel worker processes")
        s.add_argument("--seed", type=int, help="base seed (overrides experiment.seed)")
    r = sub.add_parser("report", help="figure CSVs and ANOVA tables from a finished run")
    r.add_argument("run_dir", type=Path, nargs="?")
    r.add_argument("--run", type=Path, dest="run_opt")
    return p


def _context(args):
    if args.run is not None:
        if not (args.run / "config.ini").exists():
            raise ConfigError([f"run: no config.ini in {args.run}"])
        if args.config is not None or args.seed is not None:
            raise ConfigError(["run: --config and --seed cannot be combined with --run"])
        return load_run(args.run)
    if args.config is None:
        raise ConfigError(["config: --config or --run is required"])
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(["seed: must be an unsigned 64-bit integer"])
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_output(str(args.out))
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(["workers: must be >= 1"])
        cfg = cfg.with_workers(args.workers)
    return create_run(cfg, args.config.parent.resolve())


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "report":
        run_dir = args.run_dir or args.run_opt
        if run_dir is None or not (run_dir / "config.ini").exists():
            print(f"error: {run_dir} is not a run directory", file=sys.stderr)
            return EXIT_INCOMPLETE
        ctx = load_run(run_dir)
        missing = missing_artifacts(ctx)
        if missing:
            print("incomplete run; missing:", file=sys.stderr)
            for m in missing:
                print(f"  {m}", file=sys.stderr)
            return EXIT_INCOMPLETE
        for p in write_report(ctx):
            print(p)
        return EXIT_OK

    try:
        ctx = _context(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command != "eigen" and ctx.cfg.data.dataset == "quadratic":
        print("config error: data.dataset: the quadratic dataset only supports the eigen command", file=sys.stderr)
        return EXIT_CONFIG
    print(f"run directory: {ctx.run_dir}")
    results = run_stage(ctx, args.command)
    failed = [r for r in results if r.get("status") != "ok"]
    for r in failed:
        print(f"diverged: {r['arm']} d{r['depth']} w{r['width']} rep {r['rep']}: {r['reason']}", file=sys.stderr)
    return EXIT_DIVERGED if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
