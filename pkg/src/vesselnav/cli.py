"""Command-line entry point.

    vesselnav gen-vasc | train | eval | compare | report | run  [options]

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 checkpoint/load error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_LOAD = 0, 2, 3, 4


def _limit_threads() -> None:
    n = os.environ.get("VESSELNAV_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselnav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("gen-vasc", "generate synthetic anatomies"),
                        ("train", "train sub-task or single-agent policies"),
                        ("eval", "evaluate trained models on composed tasks"),
                        ("compare", "paired significance tests between evaluated models"),
                        ("report", "assemble the markdown report"),
                        ("run", "gen-vasc, train, eval, compare and report in one go")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
        sp.add_argument("--out", default="runs/default", help="output directory")
        sp.add_argument("--variant", help="hm-marl-1, sa-rl-1 or hm-marl-10 (comma list allowed)")
        sp.add_argument("--tasks", help="comma-separated task labels")
        sp.add_argument("--episodes", type=int, help="evaluation episodes per task")
        sp.add_argument("--steps", type=int, help="exploration steps per sub-task agent")
        sp.add_argument("--n-trees", type=int, help="number of anatomies")
        sp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    from .config import RunConfig
    cfg = RunConfig.load(args.config)
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.variant:
        vs = [v.strip() for v in args.variant.split(",") if v.strip()]
        d["train"]["variants"] = vs
        d["eval"]["models"] = vs
    if args.tasks:
        d["eval"]["tasks"] = [t.strip() for t in args.tasks.split(",") if t.strip()]
    if args.episodes is not None:
        d["eval"]["episodes"] = args.episodes
    if args.steps is not None:
        d["train"]["steps_per_subtask"] = args.steps
    if args.n_trees is not None:
        d["anatomy"]["n_trees"] = args.n_trees
    return RunConfig.from_dict(d)


def main(argv: Optional[List[str]] = None) -> int:
    _limit_threads()
    from .errors import ConfigurationError, LoadError, ParameterError
    from . import pipeline

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        if args.command == "gen-vasc":
            trees = pipeline.gen_vasc(cfg, out)
            print(f"wrote {len(trees)} anatomies to {out / 'trees'}")
        elif args.command == "train":
            for v in cfg.train.variants:
                paths = pipeline.train_variant(cfg, out, v, stop_after=args.stop_after)
                done = sum(p.exists() for p in paths.values())
                print(f"{v}: {done}/{len(paths)} checkpoints in {out / 'checkpoints' / v}")
        elif args.command == "eval":
            pipeline.eval_models(cfg, out)
            print((out / "reports" / "eval.md").read_text(), end="")
        elif args.command == "compare":
            pipeline.compare_models(cfg, out)
            print((out / "reports" / "compare.md").read_text(), end="")
        elif args.command == "report":
            print(pipeline.build_report(cfg, out), end="")
        elif args.command == "run":
            print(pipeline.run_all(cfg, out), end="")
    except (ConfigurationError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
