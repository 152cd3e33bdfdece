"""Preconditioned Crank-Nicolson sampler in whitened coefficient space.

Each retained coefficient is written ``theta_i = T_i(w_i)`` with
``T_i = sigma_i F_p^{-1}(Phi(w))``, so that ``w ~ N(0, I)`` exactly when
``theta`` follows the product prior. The pCN proposal
``w' = sqrt(1 - s^2) w + s xi`` is reversible for N(0, I); the Metropolis
step only involves the likelihood ratio.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import pexp
from .observation import GaussianLikelihood
from .vi import FitReport, MeanFieldParams, PriorScales


def whiten_inverse(w, p: float, sigma=1.0):
    """T(w): standard Gaussian values to Exp(p; 0, sigma) values (monotone)."""
    w = np.asarray(w, dtype=float)
    if p == 2.0:
        return sigma * w
    tail = 2.0 * special.ndtr(-np.abs(w))
    z = (p * special.gammainccinv(1.0 / p, tail)) ** (1.0 / p)
    return sigma * np.sign(w) * z


def whiten(theta, p: float, sigma=1.0):
    """Inverse of :func:`whiten_inverse`."""
    x = np.asarray(theta, dtype=float) / sigma
    if p == 2.0:
        return x
    tail = special.gammaincc(1.0 / p, np.abs(x) ** p / p)
    return -np.sign(x) * special.ndtri(0.5 * tail)


@dataclass
class ChainConfig:
    step: float | None = None   # None: tune by a pre-run
    iterations: int = 20000
    burn_in: int = 2000
    thin: int = 1
    seed: int | None = None
    tune_batches: int = 30
    tune_batch: int = 100
    target: tuple = (0.2, 0.3)

    def __post_init__(self):
        if self.step is not None and not 0.0 < self.step <= 1.0:
            raise ValueError(f"pCN step must lie in (0, 1], got {self.step}")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn-in must be smaller than the number of iterations")
        if self.thin < 1:
            raise ValueError("thinning must be >= 1")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["target"] = list(self.target)
        return out


@dataclass
class ChainResult:
    samples: np.ndarray       # (n_kept, size) full coefficient vectors
    acceptance: float
    step: float
    low_acceptance: bool
    retained: np.ndarray
    tuning: list

    def write_csv(self, path, basis=None) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            if basis is not None:
                w.writerow([f"c_{lev}_{r}" for lev, r in basis.indices()])
            else:
                w.writerow([f"c{k}" for k in range(self.samples.shape[1])])
            for row in self.samples:
                w.writerow([repr(float(v)) for v in row])


def _pcn_steps(w, ll, step, n, loglik, rng, keep_fn=None):
    rho = math.sqrt(1.0 - step * step)
    accepted = 0
    for it in range(n):
        prop = rho * w + step * rng.standard_normal(w.shape)
        ll_prop = loglik(prop)
        if math.log(rng.random()) < ll_prop - ll:
            w, ll = prop, ll_prop
            accepted += 1
        if keep_fn is not None:
            keep_fn(it, w)
    return w, ll, accepted


def run_chain(lik: GaussianLikelihood, prior: PriorScales, config: ChainConfig,
              rng: np.random.Generator | None = None) -> ChainResult:
    """pCN chain targeting the posterior under the (truncated) product prior."""
    keep = prior.retained
    if keep.sum() == 0:
        raise ValueError("prior has no retained coefficients")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    sig = prior.sigma[keep]
    size = prior.sigma.shape[0]
    p = prior.p

    def to_theta(w):
        th = np.zeros(size)
        th[keep] = whiten_inverse(w, p, sig)
        return th

    if lik.data.N == 0:
        def loglik(w):
            return 0.0
    else:
        def loglik(w):
            return lik.value(to_theta(w))

    w = rng.standard_normal(int(keep.sum()))
    ll = loglik(w)
    tuning = []
    step = config.step
    if step is None:
        step = 0.2
        lo, hi = config.target
        for _ in range(config.tune_batches):
            w, ll, acc = _pcn_steps(w, ll, step, config.tune_batch, loglik, rng)
            rate = acc / config.tune_batch
            tuning.append((step, rate))
            if rate < lo:
                step *= 0.7
            elif rate > hi:
                step = min(1.0, step * 1.3)
            else:
                break
    kept = []

    def keep_fn(it, wv):
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            kept.append(wv.copy())

    w, ll, acc = _pcn_steps(w, ll, step, config.iterations, loglik, rng, keep_fn)
    rate = acc / config.iterations
    low = rate < 0.01
    if low:
        warnings.warn(f"pCN acceptance rate {rate:.4f} is below 1%", stacklevel=2)
    W = np.array(kept)
    samples = np.zeros((len(W), size))
    samples[:, keep] = whiten_inverse(W, p, sig)
    return ChainResult(samples, rate, step, low, keep, tuning)


@dataclass(frozen=True)
class ComparisonReport:
    vi_mean: np.ndarray
    chain_mean: np.ndarray
    vi_std: np.ndarray
    chain_std: np.ndarray
    mean_rel: float     # ||vi_mean - chain_mean|| / ||chain_mean||
    std_rel: float      # ||vi_std - chain_std|| / ||chain_std||
    mean_max_abs: float
    mean_max_rel: float  # max |d mean| / max(|chain mean|, chain std)
    std_max_rel: float   # max |d std| / chain std
    qq_max: float       # max |quantile difference| / chain std over retained coefficients

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _rel(x, ref):
    nref = float(np.linalg.norm(ref))
    diff = float(np.linalg.norm(x - ref))
    if nref == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / nref


def compare_vi_to_chain(fit, samples, probs=None) -> ComparisonReport:
    """Marginal location/scale and quantile discrepancies between a VI fit and chain samples.

    Mean gaps are relative to ``max(|chain mean|, chain std)`` so that
    coefficients whose posterior straddles zero are judged on the posterior
    spread rather than on a near-zero mean.
    """
    params = fit.params if isinstance(fit, FitReport) else fit
    if not isinstance(params, MeanFieldParams):
        raise TypeError("expected a FitReport or MeanFieldParams")
    S = samples.samples if isinstance(samples, ChainResult) else np.asarray(samples, dtype=float)
    keep = params.retained
    probs = np.linspace(0.01, 0.99, 99) if probs is None else np.asarray(probs)
    vi_mean = params.a[keep]
    vi_std = params.b[keep] * math.sqrt(pexp.abs_moment(params.q, 1.0, 2.0))
    ch = S[:, keep]
    ch_mean = ch.mean(axis=0)
    ch_std = ch.std(axis=0)
    qdev = 0.0
    for k in range(ch.shape[1]):
        vq = pexp.PExpDist(params.q, vi_mean[k], params.b[keep][k]).ppf(probs)
        cq = np.quantile(ch[:, k], probs)
        scale = ch_std[k] if ch_std[k] > 0 else 1.0
        qdev = max(qdev, float(np.max(np.abs(vq - cq)) / scale))
    with np.errstate(divide="ignore", invalid="ignore"):
        std_ratio = np.where(ch_std > 0, np.abs(vi_std - ch_std) / ch_std, np.where(vi_std == ch_std, 0.0, np.inf))
        ref = np.maximum(np.abs(ch_mean), ch_std)
        mean_ratio = np.where(ref > 0, np.abs(vi_mean - ch_mean) / ref, np.where(vi_mean == ch_mean, 0.0, np.inf))
    return ComparisonReport(vi_mean, ch_mean, vi_std, ch_std, _rel(vi_mean, ch_mean), _rel(vi_std, ch_std),
                            float(np.max(np.abs(vi_mean - ch_mean))), float(np.max(mean_ratio)),
                            float(np.max(std_ratio)), qdev)
