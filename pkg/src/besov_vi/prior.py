"""Besov priors built from p-exponential random wavelet series.

A draw of the base prior has coefficients ``2^{l(d/p - d/2 - alpha)} xi_lr``
with ``xi_lr`` i.i.d. Exp(p; 0, 1); the prior on fields is the law of
``rho * chi * F`` for a smooth cutoff ``chi``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize, stats

from .pexp import standard_sample
from .wavelets import CoeffTree, WaveletBasis, analyze, synthesize


def _smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class Cutoff:
    """Smooth bump equal to 1 on ``inner`` and 0 outside ``outer`` (per axis)."""

    inner: tuple = (0.25, 0.75)
    outer: tuple = (0.1, 0.9)

    def __post_init__(self):
        lo, hi = self.outer
        a, b = self.inner
        if not 0.0 < lo < a < b < hi < 1.0:
            raise ValueError(f"cutoff needs 0 < outer[0] < inner[0] < inner[1] < outer[1] < 1, got {self}")

    def profile(self, x):
        lo, hi = self.outer
        a, b = self.inner
        return _smooth_step((x - lo) / (a - lo)) * _smooth_step((hi - x) / (hi - b))

    def on_grid(self, basis: WaveletBasis) -> np.ndarray:
        x = (np.arange(basis.n) + 0.5) / basis.n
        prof = self.profile(x)
        if basis.d == 1:
            return prof
        return np.outer(prof, prof)


@dataclass(frozen=True)
class BesovPriorSpec:
    p: float
    alpha: float
    d: int = 1
    rho: float = 1.0
    J: int | None = None
    cutoff: Cutoff = field(default_factory=Cutoff)

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("Besov prior requires p >= 1")
        if not self.alpha > self.d / self.p:
            raise ValueError(f"need alpha > d/p, got alpha={self.alpha}, d/p={self.d / self.p}")
        if self.rho < 0:
            raise ValueError("scaling rho must be >= 0")
        if self.J is not None and self.J < -1:
            raise ValueError("truncation level J must be >= -1")

    @property
    def level_exponent(self) -> float:
        """Per-level exponent of the base coefficient scale."""
        return self.d / self.p - self.d / 2 - self.alpha

    def check_basis(self, basis: WaveletBasis) -> None:
        if basis.d != self.d:
            raise ValueError(f"prior dimension {self.d} != basis dimension {basis.d}")
        if self.J is not None and self.J > basis.max_level:
            raise ValueError(f"truncation J={self.J} exceeds basis resolution (max level {basis.max_level})")
        if basis.regularity <= self.alpha:
            warnings.warn(
                f"{basis.family} regularity {basis.regularity} does not exceed alpha={self.alpha}",
                stacklevel=3,
            )

    def retained(self, basis: WaveletBasis) -> np.ndarray:
        if self.J is None:
            return np.ones(basis.size, dtype=bool)
        return basis.levels <= self.J

    def base_scales(self, basis: WaveletBasis) -> np.ndarray:
        """Coefficient scales of the unscaled prior, zero above the truncation."""
        return np.where(self.retained(basis), basis.level_factor(self.level_exponent), 0.0)

    def coefficient_scales(self, basis: WaveletBasis) -> np.ndarray:
        return self.rho * self.base_scales(basis)

    def with_rho(self, rho: float) -> "BesovPriorSpec":
        return replace(self, rho=rho)

    def rescaled(self, N: int, kappa: float) -> "BesovPriorSpec":
        return self.with_rho(rescale_for_N(self.alpha, kappa, self.d, self.p, N).rho)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cutoff"] = {"inner": list(self.cutoff.inner), "outer": list(self.cutoff.outer)}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "BesovPriorSpec":
        data = dict(data)
        cut = data.pop("cutoff", None)
        if cut is not None:
            data["cutoff"] = Cutoff(tuple(cut["inner"]), tuple(cut["outer"]))
        return cls(**data)


@dataclass(frozen=True)
class RescalingResult:
    eps: float
    rho: float
    N: int
    kappa: float
    J: int


def contraction_exponent(alpha: float, kappa: float, d: int) -> float:
    return (alpha + kappa) / (2 * alpha + 2 * kappa + d)


def rescale_for_N(alpha: float, kappa: float, d: int, p: float, N: int) -> RescalingResult:
    """Contraction rate, prior scaling and high-dimensional truncation for N data."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if p < 1 or not alpha > d / p:
        raise ValueError(f"invalid hyperparameters alpha={alpha}, d={d}, p={p}")
    eps = N ** (-contraction_exponent(alpha, kappa, d))
    n_eps2 = N * eps * eps
    rho = n_eps2 ** (-1.0 / p)
    J = int(round(math.log2(n_eps2) / d))
    return RescalingResult(eps=eps, rho=rho, N=N, kappa=kappa, J=J)


def prior_coefficient_scales(spec: BesovPriorSpec, rescaling: RescalingResult, max_level: int) -> dict:
    """Prior marginal scales sigma_l for levels -1..max_level."""
    n_eps2 = rescaling.N * rescaling.eps ** 2
    base = n_eps2 ** (-1.0 / spec.p)
    ex = spec.alpha + spec.d / 2 - spec.d / spec.p
    return {lev: base * (1.0 if lev < 0 else 2.0 ** (-lev * ex)) for lev in range(-1, max_level + 1)}


def sample_coefficients(spec: BesovPriorSpec, basis: WaveletBasis, rng: np.random.Generator,
                        n_draws: int | None = None) -> np.ndarray:
    """Raw coefficient draws (``n_draws`` rows, or a single vector).

    All ``basis.size`` standard variables are drawn regardless of the
    truncation, so one rng stream gives coupled draws across J and rho.
    """
    shape = (basis.size,) if n_draws is None else (n_draws, basis.size)
    xi = standard_sample(spec.p, rng, shape)
    return spec.coefficient_scales(basis) * xi


def sample_prior(spec: BesovPriorSpec, basis: WaveletBasis, rng: np.random.Generator):
    """One prior draw: ``(coefficients before cutoff, field after cutoff)``."""
    spec.check_basis(basis)
    coeffs = CoeffTree(basis, sample_coefficients(spec, basis, rng))
    fld = spec.cutoff.on_grid(basis) * synthesize(coeffs)
    return coeffs, fld


def synthetic_theta0(basis: WaveletBasis, alpha0: float = 2.0, scale: float = 1.0,
                     translates: str = "all") -> CoeffTree:
    """Smooth truth with ``c_lr = scale * 2^{-l(alpha0 + d/2)}`` on levels l >= 0.

    ``translates="all"`` fills every translate of a level; the (H^kappa)*
    tail beyond level J then decays exactly like ``2^{-J(alpha0 + kappa)}``.
    ``translates="one"`` keeps only a central translate per level, which
    makes the tail decay like ``2^{-J(alpha0 + kappa + d/2)}``. The
    scaling coefficient is 0.
    """
    if translates not in ("all", "one"):
        raise ValueError(f"translates must be 'all' or 'one', got {translates!r}")
    v = np.zeros(basis.size)
    for lev in range(basis.j_max):
        sl = basis.level_slice(lev)
        val = scale * 2.0 ** (-lev * (alpha0 + basis.d / 2))
        if translates == "all":
            v[sl] = val
        else:
            # middle of the first orientation block
            v[sl.start + (2 ** (lev * basis.d)) // 2] = val
    return CoeffTree(basis, v)


def smooth_theta0(basis: WaveletBasis, amplitude: float = 2.0, width: float = 0.12,
                  center: float = 0.3) -> CoeffTree:
    """Coefficients of the Gaussian bump ``amplitude * exp(-|x - center|^2 / (2 width^2))``.

    The default centre is off the midpoint: with a symmetric Darcy source
    the flux vanishes at x = 1/2, where a bump would barely move G.
    """
    if not width > 0:
        raise ValueError("bump width must be > 0")
    grids = basis.grid()
    grids = grids if isinstance(grids, (tuple, list)) else (grids,)
    r2 = sum((g - center) ** 2 for g in grids)
    return analyze(amplitude * np.exp(-0.5 * r2 / width ** 2), basis)


def _layout(d: int, J: int):
    c0 = 1 if d == 1 else 3
    levels = [-1] + [lev for lev in range(J + 1) for _ in range(c0 * 2 ** (lev * d))]
    return np.array(levels)


def _level_weights(levels: np.ndarray, s: float) -> np.ndarray:
    return np.where(levels < 0, 1.0, np.power(2.0, np.maximum(levels, 0) * s))


@dataclass(frozen=True)
class SmallBallResult:
    r: np.ndarray
    prob: np.ndarray
    stderr: np.ndarray
    hits: np.ndarray
    n: int
    # rule-of-three 95% upper bound, reported where no draw landed in the ball
    zero_hits: np.ndarray
    upper_bound: np.ndarray


def small_ball_estimate(spec: BesovPriorSpec, kappa: float, r, n_mc: int, rng: np.random.Generator,
                        chunk: int = 20000, method: str = "plain") -> SmallBallResult:
    """MC estimate of Pi'_J(||theta||_{(H^kappa)*} <= r) under the truncated base prior.

    ``method="plain"`` counts hits among prior draws. ``method="tilted"``
    (Gaussian priors only) draws from the exponentially tilted law
    ``xi_k ~ N(0, 1/(1 + 2 s w_k))`` with ``s`` chosen so the tilted mean of
    the squared norm equals ``r^2``, and reweights; it reaches probabilities
    far below ``1/n_mc``.
    """
    if spec.J is None or spec.J > 8:
        raise ValueError("small-ball estimation needs a truncated prior with J <= 8")
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r < 0):
        raise ValueError("radius must be >= 0")
    levels = _layout(spec.d, spec.J)
    w = _level_weights(levels, 2 * spec.level_exponent) * _level_weights(levels, -2.0 * kappa)
    if method == "tilted":
        return _small_ball_tilted(spec, w, r, n_mc, rng, chunk)
    if method != "plain":
        raise ValueError(f"unknown small-ball method {method!r}")
    hits = np.zeros(r.shape, dtype=np.int64)
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        xi = standard_sample(spec.p, rng, (m, len(levels)))
        norms = np.sqrt((xi * xi) @ w)
        hits += np.sum(norms[:, None] <= r[None, :], axis=0)
        done += m
    prob = hits / n_mc
    se = np.sqrt(prob * (1 - prob) / n_mc)
    zero = hits == 0
    return SmallBallResult(r=r, prob=prob, stderr=se, hits=hits, n=n_mc,
                           zero_hits=zero, upper_bound=np.where(zero, 3.0 / n_mc, prob))


def _tilt_for_radius(w: np.ndarray, r2: float) -> float:
    """Tilt s >= 0 with sum w / (1 + 2 s w) = r2."""
    if r2 >= w.sum():
        return 0.0
    lo, hi = 0.0, 1.0
    while np.sum(w / (1 + 2 * hi * w)) > r2:
        hi *= 2.0
    return optimize.brentq(lambda s: np.sum(w / (1 + 2 * s * w)) - r2, lo, hi, xtol=1e-14, rtol=1e-12)


def _small_ball_tilted(spec, w, r, n_mc, rng, chunk):
    if spec.p != 2:
        raise ValueError("tilted small-ball estimator is only implemented for Gaussian priors (p=2)")
    prob = np.zeros(r.shape)
    se = np.zeros(r.shape)
    hits = np.zeros(r.shape, dtype=np.int64)
    for i, radius in enumerate(r):
        if radius == 0:
            continue
        r2 = radius * radius
        s = _tilt_for_radius(w, r2)
        std = 1.0 / np.sqrt(1.0 + 2.0 * s * w)
        log_norm = -0.5 * np.sum(np.log1p(2.0 * s * w))
        vals = np.empty(n_mc)
        done = 0
        while done < n_mc:
            m = min(chunk, n_mc - done)
            xi = rng.standard_normal((m, len(w))) * std
            q = (xi * xi) @ w
            inside = q <= r2
            vals[done:done + m] = np.where(inside, np.exp(s * np.minimum(q, r2) + log_norm), 0.0)
            hits[i] += int(inside.sum())
            done += m
        prob[i] = min(vals.mean(), 1.0)
        se[i] = vals.std(ddof=1) / math.sqrt(n_mc)
    zero = hits == 0
    return SmallBallResult(r=r, prob=prob, stderr=se, hits=hits, n=n_mc,
                           zero_hits=zero, upper_bound=np.where(zero, np.nan, prob))


def small_ball_exponent(p: float, alpha: float, kappa: float, d: int) -> float:
    """Exponent of r in the small-ball bound, returned with its sign (negative)."""
    return -p * d / (p * (alpha + kappa) - d)


def fit_small_ball_slope(result: SmallBallResult):
    """OLS slope of log(-log P) against log r over radii with 0 < P < 1."""
    ok = (result.hits > 0) & (result.prob < 1)
    x = np.log(result.r[ok])
    y = np.log(-np.log(result.prob[ok]))
    fit = stats.linregress(x, y)
    return fit.slope, fit


def besov_norm_draws(spec: BesovPriorSpec, b: float, n_mc: int, rng: np.random.Generator,
                     chunk: int = 20000) -> np.ndarray:
    """Draws of ||theta||_{B^b_pp} under the truncated base prior."""
    if spec.J is None:
        raise ValueError("tail estimation needs a truncated prior")
    levels = _layout(spec.d, spec.J)
    d, p = spec.d, spec.p
    w = _level_weights(levels, p * spec.level_exponent) * _level_weights(levels, p * (b + d / 2 - d / p))
    out = np.empty(n_mc)
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        xi = standard_sample(p, rng, (m, len(levels)))
        out[done:done + m] = ((np.abs(xi) ** p) @ w) ** (1.0 / p)
        done += m
    return out


def tail_survival(norms: np.ndarray, r) -> np.ndarray:
    r = np.atleast_1d(np.asarray(r, dtype=float))
    srt = np.sort(norms)
    return 1.0 - np.searchsorted(srt, r, side="left") / len(srt)


@dataclass(frozen=True)
class DecenteringResult:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    h_norm_p: float
    passed: bool


def decentering_check(spec: BesovPriorSpec, basis: WaveletBasis, h, half_widths, n_mc: int,
                      rng: np.random.Generator) -> DecenteringResult:
    """Compare MC estimates of Pi'(h + A) and exp(-||h||^p / p) Pi'(A).

    ``A`` is the symmetric box ``|theta_i| <= half_widths[i]`` over the
    retained coefficients; ``||h||^p`` is the Besov sum taken relative to
    the prior's own coefficient scales. Both events use the same draws.
    """
    if spec.J is None or spec.J > 6:
        raise ValueError("decentering check needs a truncated prior with J <= 6")
    if not 1 <= spec.p <= 2:
        raise ValueError("decentering inequality is only available for p in [1, 2]")
    spec.check_basis(basis)
    keep = spec.retained(basis)
    hv = h.values if isinstance(h, CoeffTree) else np.asarray(h, dtype=float)
    if np.any(hv[~keep] != 0):
        raise ValueError("shift h has mass above the truncation level")
    width = np.asarray(half_widths, dtype=float)
    if width.shape == (basis.size,):
        width = width[keep]
    if width.shape != (int(keep.sum()),) or np.any(width <= 0):
        raise ValueError("box A must have positive half-width on every retained coefficient")
    scales = spec.coefficient_scales(basis)[keep]
    hk = hv[keep]
    h_norm_p = float(np.sum(np.abs(hk / scales) ** spec.p))
    factor = math.exp(-h_norm_p / spec.p)
    xi = standard_sample(spec.p, rng, (n_mc, keep.sum()))
    theta = xi * scales
    in_shift = np.all(np.abs(theta - hk) <= width, axis=1)
    in_box = np.all(np.abs(theta) <= width, axis=1)
    lhs = float(in_shift.mean())
    pa = float(in_box.mean())
    lhs_se = math.sqrt(lhs * (1 - lhs) / n_mc)
    rhs_se = factor * math.sqrt(pa * (1 - pa) / n_mc)
    rhs = factor * pa
    passed = lhs >= rhs - 3.0 * math.hypot(lhs_se, rhs_se)
    return DecenteringResult(lhs, rhs, lhs_se, rhs_se, h_norm_p, passed)
