"""Command-line front end: ``besov-vi <subcommand> [--config PATH] [--seed S] [--out DIR] [--threads K]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
Failures print a one-line error JSON on stderr and write ``error.json``
into the output directory.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from ..forward import darcy
from ..forward.darcy import ConditioningError
from ..observation import Dataset, GaussianLikelihood, simulate
from ..pcn import compare_vi_to_chain, run_chain
from ..pexp import QuadratureError
from ..prior import sample_coefficients
from ..vi import FitReport, NumericError, OptimizationError, PriorScales, fit
from ..wavelets import CoeffTree, read_coeff_csv, write_coeff_csv
from . import config as config_mod
from . import rates as rates_mod
from .config import ConfigError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
NUMERIC = (NumericError, OptimizationError, ConditioningError, QuadratureError, FloatingPointError)
MAX_CHAIN_LEVEL = 6


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(rates_mod._json_safe(obj), indent=2, sort_keys=True) + "\n")


def _write_grid_csv(path: Path, basis, values, name: str) -> None:
    grids = basis.grid()
    cols = [grids] if basis.d == 1 else [g.ravel() for g in grids]
    header = ["x"] if basis.d == 1 else ["x", "x2"]
    vals = np.asarray(values).ravel()
    with open(path, "w") as fh:
        fh.write(",".join(header + [name]) + "\n")
        for i in range(vals.size):
            fh.write(",".join(f"{c[i]:.17g}" for c in cols) + f",{vals[i]:.17g}\n")


def _dataset(args, cfg, fmap, theta0) -> Dataset:
    if getattr(args, "data", None):
        try:
            return Dataset.read_csv(args.data)
        except FileNotFoundError:
            raise ConfigError(f"data file {args.data} not found") from None
    N = cfg["data"]["N"]
    return simulate(theta0, fmap, N, np.random.default_rng([cfg["seed"], 1]), seed=cfg["seed"],
                    noiseless=cfg["data"]["noiseless"])


# subcommands
def cmd_sample_prior(cfg, args, out: Path) -> dict:
    fmap = config_mod.build_map(cfg)
    spec = config_mod.build_prior(cfg, cfg["data"]["N"])
    spec.check_basis(fmap.basis)
    coeffs = CoeffTree(fmap.basis, sample_coefficients(spec, fmap.basis, np.random.default_rng([cfg["seed"], 0])))
    write_coeff_csv(coeffs, out / "prior_coeffs.csv")
    _write_grid_csv(out / "prior_field.csv", fmap.basis, fmap.theta_field(coeffs), "theta")
    info = {"command": "sample-prior", "seed": cfg["seed"], "prior": spec.to_dict(), "size": fmap.basis.size}
    _dump(out / "sample_prior.json", info)
    return info


def cmd_solve_forward(cfg, args, out: Path) -> dict:
    info = {"command": "solve-forward", "problem": cfg["problem"]["kind"]}
    if args.analytic:
        prob = cfg["problem"]
        if prob["kind"] != "darcy" or prob["d"] != 1:
            raise ConfigError("--analytic is defined for the 1-D Darcy problem")
        n = 2 ** prob["j_max"]
        dp = darcy.DarcyProblem(d=1, n=n, g=-1.0, k_min=0.0)
        u = darcy.solve_darcy(dp, np.ones(n))
        x = (np.arange(n) + 0.5) / n
        err = float(np.max(np.abs(u - x * (1 - x) / 2)))
        info.update({"analytic": "u = x(1-x)/2 for f = 1, div(f grad u) = -1", "n": n, "max_error": err})
        with open(out / "solution.csv", "w") as fh:
            fh.write("x,u,u_exact\n")
            for xi, ui in zip(x, u):
                fh.write(f"{xi:.17g},{ui:.17g},{xi * (1 - xi) / 2:.17g}\n")
        _dump(out / "solve_forward.json", info)
        return info
    fmap = config_mod.build_map(cfg)
    if args.coeffs:
        try:
            theta = read_coeff_csv(args.coeffs, fmap.basis)
        except FileNotFoundError:
            raise ConfigError(f"coefficient file {args.coeffs} not found") from None
    else:
        theta = config_mod.build_truth(cfg, fmap)
    u = fmap.apply(theta)
    _write_grid_csv(out / "solution.csv", fmap.basis, u, "u")
    info.update({"n": fmap.n, "min": float(np.min(u)), "max": float(np.max(u))})
    _dump(out / "solve_forward.json", info)
    return info


def cmd_simulate(cfg, args, out: Path) -> dict:
    fmap = config_mod.build_map(cfg)
    theta0 = config_mod.build_truth(cfg, fmap)
    data = _dataset(argparse.Namespace(data=None), cfg, fmap, theta0)
    data.write_csv(out / "data.csv")
    return {"command": "simulate", "N": data.N, "seed": cfg["seed"]}


def _prior_for(cfg, data, fmap):
    spec = config_mod.build_prior(cfg, data.N)
    return spec, PriorScales.from_spec(spec, fmap.basis)


def cmd_fit_vi(cfg, args, out: Path) -> dict:
    fmap = config_mod.build_map(cfg)
    theta0 = config_mod.build_truth(cfg, fmap)
    data = _dataset(args, cfg, fmap, theta0)
    spec, prior = _prior_for(cfg, data, fmap)
    rep = fit(GaussianLikelihood(data, fmap), prior, q=cfg["family_q"], config=config_mod.optimizer_config(cfg),
              rng=np.random.default_rng([cfg["seed"], 2]), seed=cfg["seed"])
    rep.write_json(out / "fit.json", include_wall_time=False)
    rep.params.write_csv(out / "params.csv", fmap.basis)
    info = {"command": "fit-vi", "N": data.N, "prior": spec.to_dict(), "iterations": rep.iterations,
            "converged": rep.converged, "selected": rep.selected, "final_elbo": rep.final_elbo,
            "final_elbo_se": rep.final_elbo_se, "monotone_trend": rep.monotone_trend}
    if data.N == 0:
        keep = prior.retained
        a_err = float(np.max(np.abs(rep.params.a[keep])))
        b_err = float(np.max(np.abs(rep.params.b[keep] / prior.sigma[keep] - 1.0)))
        info["prior_recovery"] = {"max_abs_a": a_err, "max_rel_b": b_err, "a_tol": 1e-3, "b_tol": 0.02,
                                  "pass": bool(a_err <= 1e-3 and b_err <= 0.02)}
    _dump(out / "fit_summary.json", info)
    return info


def cmd_run_chain(cfg, args, out: Path) -> dict:
    fmap = config_mod.build_map(cfg)
    theta0 = config_mod.build_truth(cfg, fmap)
    data = _dataset(args, cfg, fmap, theta0)
    spec, prior = _prior_for(cfg, data, fmap)
    if spec.J is None or spec.J > MAX_CHAIN_LEVEL:
        raise ConfigError(f"run-chain needs a truncated prior with J <= {MAX_CHAIN_LEVEL} "
                          "(prior/truncation 'truncated' or 'fixed')")
    ccfg = config_mod.chain_config(cfg, seed=cfg["seed"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        res = run_chain(GaussianLikelihood(data, fmap), prior, ccfg, rng=np.random.default_rng([cfg["seed"], 3]))
    res.write_csv(out / "samples.csv", fmap.basis)
    info = {"command": "run-chain", "N": data.N, "prior": spec.to_dict(), "acceptance": res.acceptance,
            "step": res.step, "low_acceptance": res.low_acceptance, "kept": int(res.samples.shape[0]),
            "chain": ccfg.to_dict(), "tuning": [list(t) for t in res.tuning]}
    if args.fit:
        try:
            rep = FitReport.read_json(args.fit)
        except FileNotFoundError:
            raise ConfigError(f"fit file {args.fit} not found") from None
        if rep.params.size != fmap.basis.size:
            raise ConfigError("fit report does not match the configured basis")
        info["comparison"] = compare_vi_to_chain(rep, res).to_dict()
    _dump(out / "chain.json", info)
    return info


def cmd_rates(cfg, args, out: Path) -> dict:
    def progress(row):
        status = "failed" if row["failed"] else f"pred={row['prediction_error']:.4g}"
        print(f"N={row['N']} rep={row['replicate']} {status} ({row['wall_time']:.1f}s)", file=sys.stderr)

    table = rates_mod.cmd_rates(cfg, progress=progress)
    summary = rates_mod.write_rate_outputs(table, out)
    return {"command": "rates", "slopes": summary["slopes"], "n_failed": summary["n_failed"]}


def _fmt_num(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and not math.isfinite(v)) else f"{v:.4g}"


def cmd_report(cfg, args, out: Path) -> dict:
    paths = [Path(p) for p in args.summary] if args.summary else [out / "summary.json"]
    lines = ["# Rate summary", ""]
    for path in paths:
        try:
            summary = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"summary file {path} not found") from None
        meta = summary["meta"]
        lines += [f"## {path}", "",
                  f"problem {meta['problem']}, p={meta['p']}, alpha={meta['alpha']}, kappa={meta['kappa']}, "
                  f"d={meta['d']}, N grid {meta['N_grid']}, {meta['replicates']} replicates", "",
                  f"theoretical exponent {_fmt_num(meta['theoretical_exponent'])}; median prediction error "
                  f"strictly decreasing: {meta['prediction_strictly_decreasing']}", "",
                  "| quantity | slope | 95% CI |", "|---|---|---|"]
        for name, s in sorted(summary["slopes"].items()):
            lines.append(f"| {name} | {_fmt_num(s['slope'])} | [{_fmt_num(s['ci_low'])}, {_fmt_num(s['ci_high'])}] |")
        lines += ["", "| N | " + " | ".join(rates_mod.ERROR_COLUMNS) + " |",
                  "|---|" + "---|" * len(rates_mod.ERROR_COLUMNS)]
        for i, N in enumerate(meta["N_grid"]):
            vals = [_fmt_num(summary["medians"][c][i]) for c in rates_mod.ERROR_COLUMNS]
            lines.append(f"| {N} | " + " | ".join(vals) + " |")
        lines.append("")
    text = "\n".join(lines)
    (out / "report.md").write_text(text)
    print(text)
    return {"command": "report", "sources": [str(p) for p in paths]}


COMMANDS = {
    "sample-prior": cmd_sample_prior,
    "solve-forward": cmd_solve_forward,
    "simulate": cmd_simulate,
    "fit-vi": cmd_fit_vi,
    "run-chain": cmd_run_chain,
    "rates": cmd_rates,
    "report": cmd_report,
}


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=default, help="rng seed (overrides the config)")
    parser.add_argument("--out", default=default, help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, default=default, help="worker threads (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="besov-vi", description=__doc__.split("\n")[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
        if name in ("simulate", "fit-vi", "run-chain", "sample-prior"):
            sp.add_argument("--N", type=int, help="sample size (overrides data.N)")
        if name in ("fit-vi", "run-chain"):
            sp.add_argument("--data", help="dataset CSV written by simulate (default: simulate from the config)")
        if name == "run-chain":
            sp.add_argument("--fit", help="fit.json to compare against the chain")
        if name == "solve-forward":
            sp.add_argument("--coeffs", help="coefficient CSV (default: the configured truth)")
            sp.add_argument("--analytic", action="store_true", help="run the analytic Darcy case")
        if name == "report":
            sp.add_argument("--summary", nargs="*", help="summary.json files (default: OUT/summary.json)")
    return parser


def _fail(kind: str, exc: Exception, code: int, out: Path | None) -> int:
    err = {"status": "error", "kind": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _dump(out / "error.json", err)
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = None
    try:
        overrides = {}
        for key in ("seed", "out", "threads"):
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        if getattr(args, "N", None) is not None:
            overrides["data"] = {"N": args.N}
        cfg = config_mod.load_config(args.config, overrides)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
        return 0
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG, out)
    except NUMERIC as exc:
        return _fail("numeric", exc, EXIT_NUMERIC, out)
    except ValueError as exc:
        # invalid inputs surfaced by the domain code (shapes, ranges)
        return _fail("input", exc, EXIT_CONFIG, out)


if __name__ == "__main__":
    sys.exit(main())
