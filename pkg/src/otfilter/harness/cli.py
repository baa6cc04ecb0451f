"""Command-line interface.

Exit codes: 0 ok, 1 experiment or check failures, 2 configuration error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..exceptions import ConfigError, ContractViolation
from .config import load_config, preset_path, presets
from .experiments import OutputConflict, build_model, run_experiment
from .plotdata import FIGURES, emit_plotdata
from .stability import stability_probe


def _resolve(path):
    p = Path(path)
    if p.is_file():
        return p
    try:
        return preset_path(path)
    except ConfigError:
        return p


def cmd_run(args):
    cfg = load_config(_resolve(args.config)).select(args.seeds, args.filters)
    try:
        table = run_experiment(cfg, args.out, force=args.force)
    except OutputConflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failures = table.manifest["failures"]
    print(f"{len(table.rows)} rows, table hash {table.manifest['table_hash'][:16]}")
    for f in failures:
        print(f"FAILED {f['filter']} seed={f['seed']}: {f['error'].splitlines()[0]}", file=sys.stderr)
    return 1 if failures else 0


def cmd_verify(args):
    from .verify import run_checks

    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def cmd_probe(args):
    cfg = load_config(_resolve(args.config))
    model = build_model(cfg.model)
    shift = None if args.shift == 0 else model.init_mean + args.shift
    report = stability_probe(model, args.steps or cfg.steps, seed=args.seed,
                             n_particles=args.n_particles, init_mean=shift)
    out = {"slope": report.slope, "r2": report.r2, "series": report.as_rows()}
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(f"slope={report.slope:.4g} r2={report.r2:.3f} final={report.divergence[-1]:.4g}")
    return 0


def cmd_plotdata(args):
    path = emit_plotdata(args.table, args.figure, args.out, args.filters)
    print(path)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="otfilter", description="Optimal transport filtering experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (file path or preset name)")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--seeds", nargs="+", type=int)
    r.add_argument("--filters", nargs="+")
    r.add_argument("--force", action="store_true", help="overwrite results of a different config")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the fast oracle and property checks")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("probe-stability", help="two-initialization contraction diagnostic")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--n-particles", type=int, default=1000)
    s.add_argument("--shift", type=float, default=5.0, help="offset of the second initial mean")
    s.add_argument("--out")
    s.set_defaults(func=cmd_probe)

    d = sub.add_parser("plotdata", help=f"emit figure CSV; keys: {', '.join(FIGURES)}")
    d.add_argument("table")
    d.add_argument("figure")
    d.add_argument("--out")
    d.add_argument("--filters", nargs="*")
    d.set_defaults(func=cmd_plotdata)

    sub.add_parser("presets", help="list shipped presets").set_defaults(
        func=lambda a: print("\n".join(presets())) or 0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    np.seterr(over="ignore", invalid="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
