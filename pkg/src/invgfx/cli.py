"""Command-line entry point.

Subcommands: gradcheck, train, eval, synth.
Exit codes: 0 success, 1 check/training failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import (
    CheckpointVersionError,
    ConfigError,
    DomainError,
    TrainingDivergedError,
    UsageError,
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invgfx",
                                description="desk-scale inverse graphics runner")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck",
                       help="finite-difference verification of every op")
    g.add_argument("--scope", default="all", help="op name or 'all'")
    g.add_argument("--instances", type=int, default=100,
                   help="random instances per op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--list", action="store_true", help="list known op names")

    t = sub.add_parser("train", help="run an experiment from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--out", default=None, help="override output directory")
    t.add_argument("--iters-override", type=int, default=None)
    t.add_argument("--help-config", action="store_true",
                   help="print the config schema and exit")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", default=None,
                   help="exported dataset directory (default: regenerate)")
    e.add_argument("--out", default=None, help="write metrics JSON here")

    s = sub.add_parser("synth", help="export a task's synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    return p


def _cmd_gradcheck(args) -> int:
    from .autodiff.gradcheck import format_report
    from .checks import REGISTRY

    if args.list:
        print("\n".join(REGISTRY.names()))
        return 0
    names = None if args.scope == "all" else [args.scope]
    results = REGISTRY.run(names=names, instances=args.instances,
                           seed=args.seed, tol=args.tol)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: %s" % ", ".join(failed))
        return 1
    return 0


def _load_config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.values["seed"] = args.seed
    if getattr(args, "iters_override", None) is not None:
        cfg.values["iters"] = args.iters_override
    return cfg


def _cmd_train(args) -> int:
    if args.help_config:
        from .config import schema_help

        print(schema_help())
        return 0
    cfg = _load_config(args)
    out_dir = args.out or cfg["out"]
    if not out_dir:
        raise ConfigError("no output directory: set 'out' in the config or --out")
    if cfg.task == "gradcheck":
        ns = argparse.Namespace(scope=cfg["gradcheck.scope"],
                                instances=cfg["gradcheck.instances"],
                                seed=cfg["seed"], tol=1e-4, list=False)
        return _cmd_gradcheck(ns)
    from .experiments import run_experiment

    result = run_experiment(cfg, out_dir)
    agg = result["report"].get("aggregate", {})
    print("done: %d iterations, artifacts in %s" % (result["state"].iteration,
                                                    out_dir))
    for key in sorted(agg):
        print("  %s = %r" % (key, agg[key]))
    return 0


def _cmd_eval(args) -> int:
    from .experiments import run_eval

    report = run_eval(args.checkpoint, args.dataset)
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    print(text)
    return 0


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    from .experiments import build_task

    bundle = build_task(cfg)
    bundle.export_dataset(args.out)
    import os

    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("# dataset provenance\n")
        fh.write(cfg.render())
    print("dataset written to %s" % args.out)
    return 0


_COMMANDS = {
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError, CheckpointVersionError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (TrainingDivergedError, DomainError) as exc:
        print("failure: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
