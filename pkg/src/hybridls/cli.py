"""Command line entry point ``hybridls``.

Subcommands::

    run       --config <path> [--output <dir>]
    allocate  --design <csv> --noise <csv> --kind {uniform,neyman,aopt} --degree D
              [--delta <rule>] [--budget L] [--out <csv>]
    price     --model s1,s2,rho --grid <csv> [--samples N] [--seed s] [--out <csv>]
    calibrate --quotes <csv> --surrogate <dir> [--rho r] [--init a,b] [--out <csv>]

Relative output paths are resolved against ``$HYBRIDLS_OUTPUT_ROOT`` when set.
Exit status: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .allocation import NoiseProfile, allocate, write_allocation_csv
from .basis import tensor_legendre_basis
from .domain import HyperRectangle, read_points_csv
from .errors import ConfigError, HybridLSError, NumericalError, StageError
from .finance import (BSModel, calibrate, load_surrogate, read_quotes_csv, synth_market,
                      write_quotes_csv)
from .harness import OUTPUT_ROOT_ENV, emit_report, load_config, run_experiment
from .sampler import make_design

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _out_path(path):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _floats(text, count, name):
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--{name}: expected {count} comma-separated numbers") from exc
    if len(vals) != count:
        raise ConfigError(f"--{name}: expected {count} comma-separated numbers")
    return vals


def parse_delta(rule: str, m: int) -> float:
    """``"c/m"`` gives ``c / m``; a plain number is used as is."""
    rule = rule.strip()
    try:
        if rule.endswith("/m"):
            return float(rule[:-2]) / m
        return float(rule)
    except ValueError as exc:
        raise ConfigError(f"bad delta rule {rule!r}") from exc


def _read_column(path, name):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not rows or name not in rows[0]:
        raise ConfigError(f"{path}: missing column {name!r}")
    return np.array([float(r[name]) for r in rows])


def cmd_run(args):
    cfg = load_config(args.config)
    out = _out_path(args.output or cfg.output)
    report = run_experiment(cfg)
    manifest = emit_report(report, out)
    print(f"wrote {len(report.rows)} rows to {out} (hash {manifest['content_hash'][:12]})")


def cmd_allocate(args):
    try:
        points = read_points_csv(args.design)
    except (OSError, ValueError, StopIteration) as exc:
        raise ConfigError(f"cannot read design {args.design}: {exc}") from exc
    noise = NoiseProfile(_read_column(args.noise, "sigma2"), "exact")
    basis = tensor_legendre_basis(HyperRectangle.cube(points.shape[1]), args.degree)
    with open(args.design) as fh:
        has_weights = "weight" in fh.readline()
    w = _read_column(args.design, "weight") if has_weights else None
    design = make_design(points, basis(points), weights=w)
    budget = args.budget if args.budget is not None else 10 * design.m
    delta = parse_delta(args.delta, design.m) if args.kind == "aopt" else None
    alloc = allocate(args.kind, design, noise, budget, delta)
    out = _out_path(args.out)
    write_allocation_csv(out, alloc, design, budget)
    print(f"{alloc.kind}: objective {alloc.objective_value:.6g}, wrote {out}")
    if alloc.tolerance_missed:
        raise NumericalError(f"allocation KKT residual {alloc.kkt_residual:.3g} above tolerance")


def cmd_price(args):
    s1, s2, rho = _floats(args.model, 3, "model")
    model = BSModel(s1, s2, rho)
    mats = np.unique(_read_column(args.grid, "T"))
    strikes = np.unique(_read_column(args.grid, "K"))
    quotes = synth_market(model, mats, strikes, args.samples, seed=args.seed)
    out = _out_path(args.out)
    write_quotes_csv(out, quotes)
    print(f"priced {quotes.prices.size} quotes, wrote {out}")


def cmd_calibrate(args):
    try:
        quotes = read_quotes_csv(args.quotes)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read quotes {args.quotes}: {exc}") from exc
    try:
        surrogate = load_surrogate(args.surrogate)
    except OSError as exc:
        raise ConfigError(f"cannot load surrogate from {args.surrogate}: {exc}") from exc
    init = _floats(args.init, 2, "init")
    res = calibrate(surrogate, quotes, args.rho, init=init)
    out = _out_path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "pipeline", "sigma1_hat", "sigma2_hat", "loss", "iterations"])
        w.writerow([0, surrogate.pipeline, f"{res.sigma1:.17g}", f"{res.sigma2:.17g}",
                    f"{res.loss:.17g}", res.iterations])
    print(f"sigma1={res.sigma1:.6f} sigma2={res.sigma2:.6f} loss={res.loss:.3e}")


def build_parser():
    p = _Parser(prog="hybridls", description="Hybrid least-squares experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--output")
    r.set_defaults(func=cmd_run)
    a = sub.add_parser("allocate", help="compute a budget allocation for a design")
    a.add_argument("--design", required=True)
    a.add_argument("--noise", required=True)
    a.add_argument("--kind", choices=("uniform", "neyman", "aopt"), required=True)
    a.add_argument("--degree", type=int, required=True, help="tensor Legendre degree on [-1,1]^d")
    a.add_argument("--delta", default="0.01/m")
    a.add_argument("--budget", type=int)
    a.add_argument("--out", default="allocation.csv")
    a.set_defaults(func=cmd_allocate)
    q = sub.add_parser("price", help="Monte Carlo spread prices on a (T, K) grid")
    q.add_argument("--model", required=True, help="sigma1,sigma2,rho")
    q.add_argument("--grid", required=True, help="CSV with columns T and K")
    q.add_argument("--samples", type=int, default=500_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="quotes.csv")
    q.set_defaults(func=cmd_price)
    c = sub.add_parser("calibrate", help="calibrate volatilities against quotes")
    c.add_argument("--quotes", required=True)
    c.add_argument("--surrogate", required=True)
    c.add_argument("--rho", type=float, default=-0.3)
    c.add_argument("--init", default="0.2,0.2")
    c.add_argument("--out", default="calibration.csv")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (ConfigError, ValueError) as exc:
        # ValueError from the library signals an invalid input value
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, StageError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HybridLSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
