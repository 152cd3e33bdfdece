"""Contraction-rate experiments: simulate, fit, evaluate per (N, replicate) and fit log-log slopes."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ..forward.darcy import ConditioningError
from ..observation import GaussianLikelihood, simulate
from ..pexp import QuadratureError
from ..prior import contraction_exponent, rescale_for_N
from ..vi import (MeanFieldParams, NumericError, OptimizationError, PriorScales, evaluate_R, fit,
                  posterior_functionals)
from . import config as config_mod

SUMMARY_VERSION = 1
ERROR_COLUMNS = ("prediction_error", "parameter_error", "prediction_rms", "parameter_rms")
NUMERIC_FAILURES = (NumericError, OptimizationError, ConditioningError, QuadratureError, FloatingPointError)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    n_points: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def ols_slope(x, y, level: float = 0.95) -> SlopeFit:
    """Ordinary least squares of y on x with a t-based confidence interval for the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    n = len(x)
    if n < 2 or np.ptp(x) == 0:
        nan = float("nan")
        return SlopeFit(nan, nan, nan, nan, nan, n)
    res = stats.linregress(x, y)
    if n > 2:
        half = float(stats.t.ppf(0.5 + level / 2, n - 2)) * res.stderr
    else:
        half = float("nan")
    return SlopeFit(float(res.slope), float(res.intercept), float(res.stderr),
                    float(res.slope - half), float(res.slope + half), n)


def log_log_slope(N, values, level: float = 0.95) -> SlopeFit:
    return ols_slope(np.log(np.asarray(N, dtype=float)), np.log(np.asarray(values, dtype=float)), level)


def evaluate_cell(params: MeanFieldParams, prior: PriorScales, theta0, fmap, N: int, n_mc: int, tau: float,
                  rng: np.random.Generator, threads: int = 1) -> dict:
    """Error columns of one fitted law: point errors at its mean and Q-averaged errors."""
    th0 = np.asarray(getattr(theta0, "values", theta0), dtype=float)
    g0 = fmap.node_values(fmap.apply(th0))
    pred = fmap.l2_lambda(fmap.node_values(fmap.apply(params.a)) - g0)
    par = float(np.sqrt(np.mean((fmap.coefficient_field(params.a) - fmap.coefficient_field(th0)) ** 2)))
    fun = posterior_functionals(params, th0, fmap, tau, n_mc, rng, threads)
    R = evaluate_R(params, prior, th0, fmap, max(N, 1), n_mc, rng, threads)[0]
    return {"prediction_error": pred, "parameter_error": par,
            "prediction_rms": fun["prediction_rms"], "parameter_rms": fun["parameter_rms"],
            "prediction_tau": fun["prediction"], "parameter_tau": fun["parameter"], "R": R}


@dataclass
class RateTable:
    rows: list
    slopes: dict
    medians: dict
    meta: dict = field(default_factory=dict)

    COLUMNS = ("N", "replicate", "eps_N", "prediction_error", "parameter_error", "prediction_rms",
               "parameter_rms", "prediction_tau", "parameter_tau", "R", "iterations", "failed", "error")

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in self.COLUMNS])

    def write_timings(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "replicate", "wall_time"])
            for row in self.rows:
                w.writerow([row["N"], row["replicate"], f"{row['wall_time']:.3f}"])

    def summary(self) -> dict:
        return {"version": SUMMARY_VERSION, "meta": self.meta, "medians": self.medians,
                "slopes": {k: v.to_dict() for k, v in self.slopes.items()},
                "n_rows": len(self.rows), "n_failed": sum(1 for r in self.rows if r["failed"])}


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.17g}"
    return v


def _cell(cfg: dict, fmap, theta0, N: int, rep: int) -> dict:
    seed = cfg["seed"]
    rng = np.random.default_rng([seed, N, rep])
    kappa = config_mod.kappa_of(cfg)
    pr = cfg["prior"]
    eps = rescale_for_N(pr["alpha"], kappa, cfg["problem"]["d"], pr["p"], N).eps
    row = {"N": N, "replicate": rep, "eps_N": eps, "failed": False, "error": "", "iterations": 0}
    t0 = time.perf_counter()
    try:
        data = simulate(theta0, fmap, N, rng, seed=seed, noiseless=cfg["data"]["noiseless"])
        spec = config_mod.build_prior(cfg, N)
        prior = PriorScales.from_spec(spec, fmap.basis)
        lik = GaussianLikelihood(data, fmap)
        rep_fit = fit(lik, prior, q=cfg["family_q"], config=config_mod.optimizer_config(cfg), rng=rng)
        fn = cfg["functionals"]
        row.update(evaluate_cell(rep_fit.params, prior, theta0, fmap, N, fn["n_mc"], fn["tau"], rng))
        row["iterations"] = rep_fit.iterations
    except NUMERIC_FAILURES as exc:
        nan = float("nan")
        row.update({c: nan for c in ERROR_COLUMNS + ("prediction_tau", "parameter_tau", "R")})
        row["failed"] = True
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wall_time"] = time.perf_counter() - t0
    return row


def _medians(rows, grid):
    out = {}
    for col in ERROR_COLUMNS + ("R",):
        meds = []
        for N in grid:
            vals = [r[col] for r in rows if r["N"] == N and not r["failed"]]
            meds.append(float(np.median(vals)) if vals else float("nan"))
        out[col] = meds
    return out


def cmd_rates(cfg: dict, progress=None) -> RateTable:
    """Run every (N, replicate) cell; cells own rng substreams seeded by (seed, N, replicate)."""
    grid = sorted(set(int(n) for n in cfg["N_grid"]))
    config_mod.check_rate_grid(grid)
    fmap = config_mod.build_map(cfg)
    theta0 = config_mod.build_truth(cfg, fmap).values
    cells = [(N, rep) for N in grid for rep in range(cfg["replicates"])]
    if cfg["threads"] > 1:
        # the forward solves release the GIL in LAPACK; results are ordered by the cell list
        with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
            rows = list(pool.map(lambda c: _cell(cfg, fmap, theta0, *c), cells))
    else:
        rows = []
        for c in cells:
            rows.append(_cell(cfg, fmap, theta0, *c))
            if progress is not None:
                progress(rows[-1])
    medians = _medians(rows, grid)
    logN = np.log(np.asarray(grid, dtype=float))
    slopes = {}
    for col in ERROR_COLUMNS:
        y = np.asarray(medians[col])
        slopes[col] = log_log_slope(grid, y)
        # the rate bounds hold up to a log factor; also fit error / sqrt(log N)
        slopes[col + "_over_sqrt_logN"] = log_log_slope(grid, y / np.sqrt(logN))
    pr = cfg["prior"]
    kappa = config_mod.kappa_of(cfg)
    d = cfg["problem"]["d"]
    pred = np.asarray(medians["prediction_error"])
    fin = np.isfinite(pred)
    meta = {
        "N_grid": grid, "replicates": cfg["replicates"], "problem": cfg["problem"]["kind"],
        "p": pr["p"], "alpha": pr["alpha"], "kappa": kappa, "d": d, "truncation": pr["truncation"],
        "theoretical_exponent": -contraction_exponent(pr["alpha"], kappa, d),
        "eps_N": [rescale_for_N(pr["alpha"], kappa, d, pr["p"], N).eps for N in grid],
        "prediction_strictly_decreasing": bool(fin.all() and np.all(np.diff(pred) < 0)),
        "config": cfg,
    }
    return RateTable(rows, slopes, medians, meta)


def write_rate_outputs(table: RateTable, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "rates.csv")
    # wall times vary run to run, so they live apart from the reproducible outputs
    table.write_timings(out / "timings.csv")
    summary = table.summary()
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return summary


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj
