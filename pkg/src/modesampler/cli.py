"""Command-line entry point: run experiments, list presets, audit a mode
registry, and document config defaults."""

from __future__ import annotations

import argparse
import sys

from . import harness
from .modefinder import fictitious_mode_audit, load_registry


def _cmd_run(args) -> int:
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    overrides = []
    if args.seed is not None:
        overrides.append(f"run.seed = {args.seed}")
    if args.budget_seconds is not None:
        overrides.append(f"run.budget_seconds = {args.budget_seconds}")
    if args.chains is not None:
        overrides.append(f"run.chains = {args.chains}")
    try:
        cfg = harness.parse_config(text + "\n" + "\n".join(overrides))
        summary = harness.run_experiment(cfg, out_dir=args.out)
    except (harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for key, value in summary.items():
        print(f"{key} = {value}")
    return 0


def _cmd_presets(_args) -> int:
    print(harness.list_presets())
    return 0


def _cmd_audit(args) -> int:
    try:
        registry, label = load_registry(args.registry)
        if not label:
            print("error: registry file has no target label", file=sys.stderr)
            return 1
        target = harness.target_from_label(label)
        entries = fictitious_mode_audit(target, registry)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        harness.write_audit_csv(args.out, entries)
        print(f"wrote {args.out}")
    else:
        print("k,delta_x,cumulative")
        for e in entries:
            delta = f"{e.displacement:.9g}" if e.converged else "nan"
            print(f"{e.index},{delta},{e.cumulative:.9g}")
    return 0


def _cmd_explain_defaults(_args) -> int:
    print(harness.explain_defaults())
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="modesampler",
        description="Multimodal MCMC benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config", help="path to the config file")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--budget-seconds", type=float, default=None)
    p_run.add_argument("--chains", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_presets = sub.add_parser("presets", help="list benchmark presets")
    p_presets.set_defaults(func=_cmd_presets)

    p_audit = sub.add_parser("audit",
                             help="re-run the mode audit on a registry file")
    p_audit.add_argument("registry", help="registry.txt from a previous run")
    p_audit.add_argument("--out", default=None, help="write CSV here")
    p_audit.set_defaults(func=_cmd_audit)

    p_expl = sub.add_parser("explain-defaults",
                            help="document every config key and default")
    p_expl.set_defaults(func=_cmd_explain_defaults)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
