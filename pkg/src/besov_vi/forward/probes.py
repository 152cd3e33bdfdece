"""Empirical probes of the forward map's Lipschitz and stability behaviour on prior draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..prior import BesovPriorSpec, sample_coefficients
from ..wavelets import analyze, besov_norm, sobolev_dual_norm
from .maps import ForwardMap

DEFAULT_KAPPA = {"darcy": 1.0, "subdiffusion": 2.0, "linear-toy": 0.0}


@dataclass
class ProbeReport:
    kappa: float
    b: float
    g_dist: np.ndarray       # ||G(theta1) - G(theta2)||_{L^2_lambda}
    theta_dist: np.ndarray   # dual Sobolev distance of the coefficients
    f_dist: np.ndarray       # ||f_theta1 - f_theta2||_{L^2}
    norm_max: np.ndarray     # max of the two Besov B^b_pp norms
    max_ratio: float
    median_ratio: float
    l_fit: float
    c_l_fit: float
    stability_spearman: float
    stability_exponent: float

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _pair_distances(fmap: ForwardMap, th1, th2, kappa: float, b: float, p: float):
    g1 = fmap.node_values(fmap.apply(th1))
    g2 = fmap.node_values(fmap.apply(th2))
    dg = fmap.l2_lambda(g1 - g2)
    # theta enters G only through the cut-off field, so norms use its coefficients
    c1 = analyze(fmap.theta_field(th1), fmap.basis)
    c2 = analyze(fmap.theta_field(th2), fmap.basis)
    dth = sobolev_dual_norm(c1 - c2, kappa)
    # grid L^2 of the coefficient fields (mean over cells)
    df = float(np.sqrt(np.mean((fmap.coefficient_field(th1) - fmap.coefficient_field(th2)) ** 2)))
    nm = max(besov_norm(c1, b, p), besov_norm(c2, b, p))
    return dg, dth, df, nm


def pair_distances(fmap: ForwardMap, theta1, theta2, kappa: float, b: float = 0.0, p: float = 2.0):
    """``(||dG||_{L^2_lambda}, ||dtheta||_{(H^kappa)*}, ||df||_{L^2}, max Besov norm)`` of one pair."""
    return _pair_distances(fmap, fmap._values(theta1), fmap._values(theta2), kappa, b, p)


def probe_conditions(fmap: ForwardMap, prior: BesovPriorSpec, n_pairs: int, rng: np.random.Generator,
                     kappa: float | None = None, b: float | None = None,
                     scale_range=(1e-2, 1.0)) -> ProbeReport:
    """Distances over ``n_pairs`` prior-based pairs.

    Each pair is a prior draw ``theta1`` and ``theta2 = theta1 + s delta``
    with ``delta`` an independent prior draw and ``s`` log-uniform on
    ``scale_range``; ``scale_range=(1, 1)`` gives ``theta2 = theta1 + delta``.

    ``max_ratio`` is the largest ||dG|| / ||dtheta||_{(H^kappa)*}, a lower
    bound on ``C_L (1 + M^l)``. ``l_fit`` is the slope of log ratio against
    log(1 + M) and ``c_l_fit`` the smallest C_L consistent with it. The
    stability scatter pairs ||df|| with ||dG|| and reports the Spearman
    association and a fitted power exponent.
    """
    if n_pairs < 10:
        raise ValueError("probe needs at least 10 pairs")
    prior.check_basis(fmap.basis)
    kappa = DEFAULT_KAPPA[fmap.kind] if kappa is None else kappa
    b = prior.alpha - prior.d / prior.p - 0.5 if b is None else b
    rows = []
    for _ in range(n_pairs):
        th1 = sample_coefficients(prior, fmap.basis, rng)
        delta = sample_coefficients(prior, fmap.basis, rng)
        s = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1])))
        th2 = th1 + s * delta
        rows.append(_pair_distances(fmap, th1, th2, kappa, max(b, 0.0), prior.p))
    dg, dth, df, nm = (np.array(col) for col in zip(*rows))
    ok = dth > 0
    ratio = dg[ok] / dth[ok]
    if ok.sum() >= 3 and np.ptp(np.log1p(nm[ok])) > 0:
        l_fit = float(stats.linregress(np.log1p(nm[ok]), np.log(ratio)).slope)
    else:
        l_fit = 0.0
    l_pos = max(l_fit, 0.0)
    c_l = float(np.max(ratio / (1.0 + nm[ok] ** l_pos))) if ok.any() else 0.0
    pos = (dg > 0) & (df > 0)
    rho = float(stats.spearmanr(dg[pos], df[pos]).statistic) if pos.sum() >= 3 else float("nan")
    expo = float(stats.linregress(np.log(dg[pos]), np.log(df[pos])).slope) if pos.sum() >= 3 else float("nan")
    return ProbeReport(kappa=kappa, b=b, g_dist=dg, theta_dist=dth, f_dist=df, norm_max=nm,
                       max_ratio=float(ratio.max()) if ok.any() else 0.0,
                       median_ratio=float(np.median(ratio)) if ok.any() else 0.0,
                       l_fit=l_fit, c_l_fit=c_l, stability_spearman=rho, stability_exponent=expo)
