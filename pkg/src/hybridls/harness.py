"""Experiment driver: configuration, the synthetic and finance studies, reports.

Configuration files are flat ``key = value`` text, ``#`` starts a comment and
lists are comma separated.  Keys and defaults are those of
:class:`ExperimentConfig`.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .allocation import (NoiseProfile, a_optimal_allocation, neyman_allocation,
                         support_sparsity, uniform_allocation)
from .basis import christoffel, tensor_legendre_basis
from .constraint import project
from .decoder import (NoisyOracle, best_approximation, estimate_variance, mse, mse_from_coefficients,
                      run_erm, run_hls)
from .domain import HyperRectangle, PointStream, ProductMeasure, generate_points, quadrature_integral
from .errors import ConfigError, StageError
from .finance import (FINANCE_DOMAIN, STUDY_MATURITIES, STUDY_STRIKES, BSModel, calibrate, mc_reference,
                      payoff_field, payoff_oracle, synth_market)
from .random_subspace import build_subspace, mc_average_baseline
from .sampler import BoostingPolicy, adaptive_boost, sample_induced_continuous, sample_induced_discrete
from .seeding import SeedPlan

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "load_config",
    "parse_config",
    "synthetic_target",
    "variance_factor_ratio",
    "run_synthetic",
    "run_finance",
    "run_experiment",
    "emit_report",
    "OUTPUT_ROOT_ENV",
]

OUTPUT_ROOT_ENV = "HYBRIDLS_OUTPUT_ROOT"
EXPERIMENTS = ("synthetic", "finance-surrogate", "finance-calibrate")
ROW_FIELDS = ["experiment", "D", "gamma", "L", "pipeline", "variant", "replicate", "mse", "cond", "m",
              "design_hash", "seed"]
AGG_FIELDS = ["experiment", "D", "gamma", "L", "pipeline", "variant", "count", "mean_mse",
              "mean_log10_mse", "median_log10_mse", "q1_log10_mse", "q3_log10_mse"]
CAL_FIELDS = ["replicate", "pipeline", "variant", "sigma1_hat", "sigma2_hat", "loss", "iterations"]


@dataclass
class ExperimentConfig:
    experiment: str = "synthetic"
    seed: int = 0
    replicates: int = 100
    output: str = "results"
    workers: int = 1
    pipelines: tuple = ("HLS-0", "HLS-1", "HLS-2", "ERM")
    # synthetic study
    degrees: tuple = (4, 5, 6)
    m_factor: int = 3
    gammas: tuple = (10, 30, 100, 300, 1000)
    budgets: tuple = (2500, 7500, 25000, 75000, 250000)
    R: int = 50
    delta_factor: float = 0.01
    quad_level: int = 64
    halton_bases: tuple = (2, 3)
    # finance study
    n: int = 100
    Q_log2: int = 16
    L: int = 500000
    boost_trials: int = 50
    cond_threshold: float = 2.5
    accept_rule: str = "first-below-threshold"
    m0_factor: float = 2.0
    m_growth: float = 0.1
    test_points: int = 1000
    reference_samples: int = 500000
    market_samples: int = 500000
    variants: tuple = ("regular", "projected")
    rho_fixed: float = -0.3
    true_params: tuple = (0.3, 0.1, -0.3)
    init: tuple = (0.2, 0.2)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.replicates < 0:
            raise ConfigError("replicates must be nonnegative")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        bad = set(self.pipelines) - {"HLS-0", "HLS-1", "HLS-2", "ERM"}
        if bad:
            raise ConfigError(f"unknown pipelines {sorted(bad)}")
        if len(self.gammas) != len(self.budgets):
            raise ConfigError("gammas and budgets must have equal length")
        if any(d < 0 for d in self.degrees):
            raise ConfigError("degrees must be nonnegative")
        if not 0 < self.delta_factor <= 1:
            raise ConfigError("delta_factor must lie in (0, 1] so that delta lies in (0, 1/m]")
        if self.R < 2:
            raise ConfigError("R must be at least 2")
        if self.m_factor < 1:
            raise ConfigError("m_factor must be at least 1")
        for L, d in ((b, max(self.degrees or (0,))) for b in self.budgets):
            if L < self.m_factor * (d + 1) ** 2:
                raise ConfigError(f"budget {L} smaller than the design size")
        if self.cond_threshold <= 1 or self.boost_trials < 1:
            raise ConfigError("boosting needs trials >= 1 and threshold > 1")
        bad = set(self.variants) - {"regular", "projected"}
        if bad:
            raise ConfigError(f"unknown variants {sorted(bad)}")
        return self

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}


def _convert(name, raw, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(float(raw)) if float(raw).is_integer() else int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                typ = type(default[0])
                return tuple(typ(float(s)) if typ is int else float(s) for s in items)
            if not default and name in ("degrees",):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    defaults = ExperimentConfig()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, getattr(defaults, key))
    cfg = dataclasses.replace(defaults, **values)
    if cfg.experiment.startswith("finance") and "pipelines" not in values:
        cfg = dataclasses.replace(cfg, pipelines=("HLS-0", "HLS-1", "HLS-2", "ERM"))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    calibration: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> list:
        cells = {}
        for r in self.rows:
            key = (r["experiment"], r["D"], r["gamma"], r["L"], r["pipeline"], r["variant"])
            cells.setdefault(key, []).append(r["mse"])
        out = []
        for key in sorted(cells, key=lambda k: tuple(str(v) for v in k)):
            v = np.asarray(cells[key], dtype=float)
            lg = np.log10(np.maximum(v, 1e-300))
            out.append(dict(zip(AGG_FIELDS, list(key) + [
                v.size, float(v.mean()), float(lg.mean()), float(np.median(lg)),
                float(np.percentile(lg, 25)), float(np.percentile(lg, 75))])))
        return out


# ----------------------------------------------------------------------------- synthetic


def synthetic_target(x):
    """``f(z1, z2) = z1^2 z2 exp(z1 + z2)``."""
    x = np.atleast_2d(x)
    return x[:, 0] ** 2 * x[:, 1] * np.exp(x[:, 0] + x[:, 1])


def synthetic_noise_std(x):
    """``sigma(x) = 2 (1.001 - ||x||_inf)^2``."""
    x = np.atleast_2d(x)
    return 2.0 * (1.001 - np.max(np.abs(x), axis=1)) ** 2


def synthetic_oracle() -> NoisyOracle:
    return NoisyOracle.gaussian(synthetic_target, synthetic_noise_std)


def variance_factor_ratio(basis, sigma=synthetic_noise_std, level: int = 64) -> float:
    """``||sigma sqrt(Phi)||_{L1}^2 / ||sigma sqrt(Phi)||_{L2}^2`` by tensor quadrature."""
    prof = christoffel(basis)
    meas = basis.measure
    l1 = quadrature_integral(lambda x: sigma(x) * np.sqrt(prof.phi(x)), meas, level)
    l2 = quadrature_integral(lambda x: sigma(x) ** 2 * prof.phi(x), meas, level)
    return l1 ** 2 / l2


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_synthetic(config: ExperimentConfig) -> ExperimentReport:
    """Polynomial approximation of the synthetic target on ``[-1, 1]^2``.

    Per degree ``D``: a fixed Halton-driven Christoffel design with
    ``m = m_factor (D+1)^2`` points, one offline variance estimate with ``R``
    draws per point, the three allocations, then ``replicates`` coupled
    replicates per budget.  Replicate noise comes from substreams keyed by
    ``(D, budget index, replicate, pipeline)``.
    """
    if config.experiment != "synthetic":
        raise ConfigError("run_synthetic needs experiment = synthetic")
    plan = SeedPlan(config.seed)
    oracle = synthetic_oracle()
    domain = HyperRectangle.cube(2)
    report = ExperimentReport(config)
    for D in config.degrees:
        basis = tensor_legendre_basis(domain, D)
        m = config.m_factor * basis.n
        t0 = time.perf_counter()
        design = sample_induced_continuous(basis, m, PointStream.halton(config.halton_bases))
        noise = estimate_variance(oracle, design, config.R, plan.rng("variance", D))
        delta = config.delta_factor / m
        allocs = {"HLS-0": uniform_allocation(m)}
        if "HLS-1" in config.pipelines:
            allocs["HLS-1"] = neyman_allocation(design, noise)
        if "HLS-2" in config.pipelines:
            allocs["HLS-2"] = a_optimal_allocation(design, noise, 1.0, delta)
        report.timings.append({"stage": f"setup D={D}", "seconds": time.perf_counter() - t0})
        alpha_star, f_norm2 = best_approximation(basis, synthetic_target, config.quad_level)
        meta = {"n": basis.n, "m": m, "cond": design.cond, "design_hash": design.digest(),
                "variance_factor_ratio": variance_factor_ratio(basis, level=config.quad_level),
                "opt": f_norm2 - float(alpha_star @ alpha_star)}
        if "HLS-2" in allocs:
            a2 = allocs["HLS-2"]
            meta.update({"aopt_kkt_residual": a2.kkt_residual, "aopt_tolerance_missed": a2.tolerance_missed,
                         "aopt_support": support_sparsity(a2)[0]})
        report.meta[f"D={D}"] = meta

        def one(job, D=D, basis=basis, m=m, design=design, noise=noise, allocs=allocs,
                alpha_star=alpha_star, f_norm2=f_norm2):
            g, r = job
            L, gamma = config.budgets[g], config.gammas[g]
            rows, times = [], []
            for k, pipe in enumerate(config.pipelines):
                t = time.perf_counter()
                try:
                    if pipe == "ERM":
                        approx = run_erm(basis, oracle, L, plan.rng("erm", D, g, r))
                    else:
                        approx = run_hls(pipe, basis, oracle, m, L, design=design, noise=noise,
                                         allocation=allocs[pipe],
                                         evaluation_rng=plan.rng("evaluation", D, g, r, k))
                except StageError as exc:
                    raise StageError(f"D={D} gamma={gamma} {pipe} replicate={r}", exc) from exc
                err = mse_from_coefficients(approx.coefficients, alpha_star, f_norm2)
                rows.append({"experiment": "synthetic", "D": D, "gamma": gamma, "L": L, "pipeline": pipe,
                             "variant": "regular", "replicate": r, "mse": err,
                             "cond": design.cond if pipe != "ERM" else float("nan"), "m": m,
                             "design_hash": design.digest() if pipe != "ERM" else "", "seed": config.seed})
                times.append({"stage": f"D={D} L={L} {pipe} r={r}", "seconds": time.perf_counter() - t})
            return rows, times

        jobs = [(g, r) for g in range(len(config.budgets)) for r in range(config.replicates)]
        for rows, times in _map(one, jobs, config.workers):
            report.rows.extend(rows)
            report.timings.extend(times)
    return report


# ----------------------------------------------------------------------------- finance


def _finance_replicate(config, plan, r, grid, test_x, f_test, quotes):
    model = BSModel()
    field_ = payoff_field(model)
    oracle = payoff_oracle(model)
    rows, cal, times = [], [], []
    t = time.perf_counter()
    basis, cone, snaps = build_subspace(field_, config.n, grid, plan.rng("subspace", r), domain=FINANCE_DOMAIN)
    policy = BoostingPolicy(config.boost_trials, config.cond_threshold, config.accept_rule)
    design = adaptive_boost(lambda m, s: sample_induced_discrete(basis, m, s), policy,
                            plan.stream("iid", 1, "design", 1, r), int(np.ceil(config.m0_factor * config.n)))
    sigma2 = np.maximum(snaps.matrix[design.grid_indices].var(axis=1, ddof=1), 1e-12)
    noise = NoiseProfile(sigma2, "reused-snapshots")
    setup = time.perf_counter() - t
    times.append({"stage": f"setup r={r}", "seconds": setup})
    surrogates = {"AVG": mc_average_baseline(basis, config.n)}
    for k, pipe in enumerate(config.pipelines):
        t = time.perf_counter()
        try:
            if pipe == "ERM":
                approx = run_erm(basis, oracle, config.L, plan.rng("erm", r))
            else:
                approx = run_hls(pipe, basis, oracle, design.m, config.L, config.delta_factor / design.m,
                                 design=design, noise=noise, evaluation_rng=plan.rng("evaluation", r, k))
        except StageError as exc:
            raise StageError(f"{pipe} replicate={r}", exc) from exc
        times.append({"stage": f"{pipe} r={r}", "seconds": time.perf_counter() - t + (0 if pipe == "ERM" else setup)})
        surrogates[pipe] = approx
    for pipe, approx in surrogates.items():
        for variant in config.variants:
            s = project(approx, cone) if variant == "projected" and pipe != "AVG" else approx
            err = mse(s, f_test, test_points=test_x)
            rows.append({"experiment": config.experiment, "D": "", "gamma": config.L / design.m, "L": config.L,
                         "pipeline": pipe, "variant": variant, "replicate": r, "mse": err, "cond": design.cond,
                         "m": design.m, "design_hash": design.digest(), "seed": config.seed})
            if quotes is not None and pipe != "AVG":
                c = calibrate(s, quotes, config.rho_fixed, init=config.init)
                cal.append({"replicate": r, "pipeline": pipe, "variant": variant, "sigma1_hat": c.sigma1,
                            "sigma2_hat": c.sigma2, "loss": c.loss, "iterations": c.iterations})
    return rows, cal, times


def run_finance(config: ExperimentConfig) -> ExperimentReport:
    """Spread-option surrogates over random payoff subspaces, optionally calibrated.

    Per replicate: a fresh subspace of ``n`` payoff realisations on a
    scrambled Sobol grid of ``2^Q_log2`` points, an adaptively boosted
    leverage-score design (re-boosted per replicate), variances from the
    stored snapshots, then each pipeline in regular and projected form.  The
    test set and its Monte Carlo reference are shared by all replicates.
    """
    if not config.experiment.startswith("finance"):
        raise ConfigError("run_finance needs a finance experiment")
    plan = SeedPlan(config.seed)
    report = ExperimentReport(config)
    t = time.perf_counter()
    grid = generate_points(plan.stream("sobol", 5, "design"), 2 ** config.Q_log2, FINANCE_DOMAIN)
    test_x = ProductMeasure.uniform(FINANCE_DOMAIN).sample(config.test_points, plan.rng("test"))
    f_test = mc_reference(test_x, config.reference_samples, plan.rng("reference"))
    quotes = None
    if config.experiment == "finance-calibrate":
        truth = BSModel(*config.true_params)
        quotes = synth_market(truth, STUDY_MATURITIES, STUDY_STRIKES, config.market_samples,
                              rng=plan.rng("market"), seed=config.seed)
    report.timings.append({"stage": "shared setup", "seconds": time.perf_counter() - t})
    results = _map(lambda r: _finance_replicate(config, plan, r, grid, test_x, f_test, quotes),
                   range(config.replicates), config.workers)
    for rows, cal, times in results:
        report.rows.extend(rows)
        report.calibration.extend(cal)
        report.timings.extend(times)
    report.meta["grid_points"] = int(grid.shape[0])
    report.meta["design_sizes"] = sorted({r["m"] for r in report.rows})
    return report


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    if config.experiment == "synthetic":
        return run_synthetic(config)
    return run_finance(config)


# ----------------------------------------------------------------------------- output


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return v


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def emit_report(report: ExperimentReport, directory) -> dict:
    """Write ``rows.csv``, ``aggregate.csv``, ``calibration.csv``, ``timings.csv`` and ``manifest.json``.

    Wall-clock timings are kept out of the first three files so that a
    rerun with the same configuration reproduces them byte for byte; the
    manifest hash covers exactly those files.
    """
    texts = {
        "rows.csv": _csv_text(ROW_FIELDS, report.rows),
        "aggregate.csv": _csv_text(AGG_FIELDS, report.aggregates()),
        "calibration.csv": _csv_text(CAL_FIELDS, report.calibration),
    }
    digest = hashlib.sha256()
    for name in sorted(texts):
        digest.update(name.encode())
        digest.update(texts[name].encode())
    manifest = {"config": report.config.as_dict(), "seed": report.config.seed,
                "content_hash": digest.hexdigest(), "meta": report.meta}
    try:
        os.makedirs(directory, exist_ok=True)
        for name, text in texts.items():
            with open(os.path.join(directory, name), "w", newline="") as fh:
                fh.write(text)
        with open(os.path.join(directory, "timings.csv"), "w", newline="") as fh:
            fh.write(_csv_text(["stage", "seconds"], report.timings))
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    except OSError as exc:
        raise OSError(f"cannot write report to {directory}: {exc}") from exc
    return manifest


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
