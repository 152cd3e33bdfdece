"""Experiment configuration: JSON schema validation, defaults and object builders."""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from ..forward.maps import ForwardMap, darcy_map, linear_toy_map, subdiffusion_map
from ..forward.probes import DEFAULT_KAPPA
from ..pcn import ChainConfig
from ..prior import BesovPriorSpec, Cutoff, rescale_for_N, smooth_theta0, synthetic_theta0
from ..vi import OptimizerConfig
from ..wavelets import CoeffTree


class ConfigError(ValueError):
    """Invalid configuration (schema violation or inconsistent values)."""


def _load_json(name: str) -> dict:
    return json.loads(resources.files(__package__).joinpath(name).read_text())


def defaults() -> dict:
    return _load_json("defaults.json")


def schema() -> dict:
    return _load_json("config_schema.json")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None


def _check_semantics(cfg: dict) -> None:
    prob, prior = cfg["problem"], cfg["prior"]
    if prob["kind"] == "subdiffusion" and prob["d"] != 1:
        raise ConfigError("problem/d: subdiffusion is one-dimensional")
    if not prior["alpha"] > prob["d"] / prior["p"]:
        raise ConfigError(f"prior/alpha: need alpha > d/p, got alpha={prior['alpha']}, d/p={prob['d'] / prior['p']}")
    if prior["truncation"] == "fixed" and prior["J"] is None:
        raise ConfigError("prior/J: truncation 'fixed' needs a level J")
    if prior["J"] is not None and prior["J"] > prob["j_max"] - 1:
        raise ConfigError(f"prior/J: level {prior['J']} exceeds the basis resolution (max {prob['j_max'] - 1})")
    ch = cfg["chain"]
    if not ch["burn_in"] < ch["iterations"]:
        raise ConfigError("chain/burn_in: must be smaller than chain/iterations")
    q = cfg["family_q"]
    if q is not None and q < prior["p"]:
        raise ConfigError("family_q: q must be >= p")
    cut = prob["cutoff"]
    if cut is not None:
        try:
            Cutoff(tuple(cut["inner"]), tuple(cut["outer"]))
        except ValueError as exc:
            raise ConfigError(f"problem/cutoff: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated at each layer."""
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
        validate(user)
    cfg = _merge(defaults(), user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    _check_semantics(cfg)
    return cfg


def check_rate_grid(grid) -> None:
    """At least 4 sizes spanning at least two octaves."""
    grid = sorted(set(int(n) for n in grid))
    if len(grid) < 4 or grid[-1] < 4 * grid[0]:
        raise ConfigError(f"N_grid: need >= 4 sizes spanning >= 2 octaves, got {grid}")


# builders
def build_map(cfg: dict) -> ForwardMap:
    prob = cfg["problem"]
    cut = prob["cutoff"]
    cutoff = None if cut is None else Cutoff(tuple(cut["inner"]), tuple(cut["outer"]))
    if prob["kind"] == "darcy":
        dc = prob["darcy"]
        return darcy_map(d=prob["d"], j_max=prob["j_max"], family=prob["family"], g=dc["g"],
                         k_min=dc["k_min"], cutoff=cutoff)
    if prob["kind"] == "subdiffusion":
        return subdiffusion_map(j_max=prob["j_max"], family=prob["family"], cutoff=cutoff, **prob["subdiffusion"])
    return linear_toy_map(d=prob["d"], j_max=prob["j_max"], family=prob["family"], cutoff=cutoff)


def kappa_of(cfg: dict) -> float:
    k = cfg["prior"]["kappa"]
    return DEFAULT_KAPPA[cfg["problem"]["kind"]] if k is None else float(k)


def build_prior(cfg: dict, N: int | None = None) -> BesovPriorSpec:
    """Prior for sample size ``N`` according to the truncation mode."""
    pr, prob = cfg["prior"], cfg["problem"]
    cut = prob["cutoff"]
    cutoff = Cutoff() if cut is None else Cutoff(tuple(cut["inner"]), tuple(cut["outer"]))
    mode = pr["truncation"]
    base = dict(p=pr["p"], alpha=pr["alpha"], d=prob["d"], cutoff=cutoff)
    if mode == "none":
        return BesovPriorSpec(rho=pr["rho"], **base)
    if mode == "fixed":
        return BesovPriorSpec(rho=pr["rho"], J=pr["J"], **base)
    resc = rescale_for_N(pr["alpha"], kappa_of(cfg), prob["d"], pr["p"], max(int(N or 1), 1))
    if mode == "rescaled":
        return BesovPriorSpec(rho=resc.rho, **base)
    J = min(resc.J, prob["j_max"] - 1)
    return BesovPriorSpec(rho=resc.rho, J=J, **base)


def build_truth(cfg: dict, fmap: ForwardMap) -> CoeffTree:
    tr = cfg["truth"]
    if tr["kind"] == "bump":
        return smooth_theta0(fmap.basis, tr["amplitude"], tr["width"], tr["center"])
    if tr["kind"] == "synthetic":
        return synthetic_theta0(fmap.basis, tr["alpha0"], tr["amplitude"])
    return CoeffTree.zeros(fmap.basis)


def optimizer_config(cfg: dict) -> OptimizerConfig:
    return OptimizerConfig(threads=cfg["threads"], **cfg["optimizer"])


def chain_config(cfg: dict, seed=None) -> ChainConfig:
    ch = cfg["chain"]
    return ChainConfig(step=ch["step"], iterations=ch["iterations"], burn_in=ch["burn_in"], thin=ch["thin"],
                       seed=seed)
