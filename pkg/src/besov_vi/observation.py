"""Random-design Gaussian regression Y = G(theta)(X) + eps, eps ~ N(0, 1).

Besides data generation and the likelihood this module evaluates the
information distances between two data laws P_theta1 and P_theta2: the
KL divergence, the Hellinger affinity and the order-2 Renyi divergence,
each by quadrature over the design (trapezoid on the observation nodes)
and, where needed, over the response (Gauss-Hermite).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import hermite_e

from .forward.maps import ForwardMap

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{X.shape[0]} design points but {Y.shape[0]} responses")
        if X.size and (X.min() < 0 or X.max() > 1):
            raise ValueError("design points must lie in the unit cube")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def N(self) -> int:
        return int(self.Y.shape[0])

    @property
    def d(self) -> int:
        return 1 if self.X.ndim == 1 else self.X.shape[1]

    @classmethod
    def empty(cls, d: int = 1, meta: dict | None = None) -> "Dataset":
        X = np.zeros((0,) if d == 1 else (0, d))
        return cls(X, np.zeros(0), dict(meta or {}))

    def write_csv(self, path) -> Path:
        """Write ``x[,x2],y`` rows with 17 significant digits plus a JSON sidecar."""
        path = Path(path)
        cols = ["x"] if self.d == 1 else ["x", "x2"]
        X = self.X.reshape(self.N, -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + ["y"])
            for xi, yi in zip(X, self.Y):
                w.writerow([f"{v:.17g}" for v in xi] + [f"{yi:.17g}"])
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")
        return sidecar

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(header))
        sidecar = path.with_suffix(".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        X = rows[:, 0] if len(header) == 2 else rows[:, :-1]
        return cls(X, rows[:, -1], meta)


def simulate(theta0, fmap: ForwardMap, N: int, rng: np.random.Generator, seed=None,
             noiseless: bool = False) -> Dataset:
    """Draw X_i uniform on the domain, then Y_i = G(theta0)(X_i) + N(0, 1) noise.

    ``noiseless=True`` sets Y_i = G(theta0)(X_i) exactly (self-consistency checks).
    """
    if N < 0:
        raise ValueError("N must be >= 0")
    values = fmap._values(theta0)
    meta = {"N": int(N), "seed": seed, "map": fmap.to_dict(), "theta0": values.tolist(),
            "noiseless": bool(noiseless)}
    if N == 0:
        return Dataset.empty(fmap.d, meta)
    X = fmap.sample_design(rng, N)
    mean = fmap.predict(values, X)
    Y = mean if noiseless else mean + rng.standard_normal(N)
    return Dataset(X, Y, meta)


class GaussianLikelihood:
    """log p(D | theta) for a fixed dataset, with its coefficient gradient."""

    def __init__(self, data: Dataset, fmap: ForwardMap):
        if data.N and data.d != fmap.d:
            raise ValueError(f"dataset dimension {data.d} != map dimension {fmap.d}")
        self.data = data
        self.fmap = fmap
        self.P = fmap.interp_matrix(data.X) if data.N else None
        self.const = -0.5 * data.N * LOG_2PI

    def residuals(self, out) -> np.ndarray:
        return self.data.Y - self.P @ self.fmap.node_values(out).ravel()

    def value(self, theta) -> float:
        if self.data.N == 0:
            return 0.0
        r = self.residuals(self.fmap.apply(theta))
        return float(self.const - 0.5 * np.dot(r, r))

    def value_and_grad(self, theta):
        if self.data.N == 0:
            return 0.0, np.zeros(self.fmap.basis.size)
        out, vjp = self.fmap.apply_with_vjp(theta)
        r = self.residuals(out)
        node_bar = self.P.T @ r
        grad = vjp(self.fmap.node_values_vjp(node_bar))
        return float(self.const - 0.5 * np.dot(r, r)), grad


def log_likelihood(theta, data: Dataset, fmap: ForwardMap) -> float:
    return GaussianLikelihood(data, fmap).value(theta)


def output_difference(theta1, theta2, fmap: ForwardMap) -> np.ndarray:
    """G(theta1) - G(theta2) on the observation nodes."""
    return fmap.node_values(fmap.apply(theta1)) - fmap.node_values(fmap.apply(theta2))


def kl_between_laws(theta1, theta2, fmap: ForwardMap) -> float:
    """D(P_theta1 || P_theta2) = 1/2 ||G(theta1) - G(theta2)||^2_{L^2_lambda}."""
    return 0.5 * fmap.l2_lambda(output_difference(theta1, theta2, fmap)) ** 2


def kl_monte_carlo(theta1, theta2, fmap: ForwardMap, n: int, rng: np.random.Generator):
    """Average of log(p1/p2) over n draws of (X, Y) from P_theta1; returns (mean, stderr)."""
    X = fmap.sample_design(rng, n)
    P = fmap.interp_matrix(X)
    g1 = P @ fmap.node_values(fmap.apply(theta1)).ravel()
    g2 = P @ fmap.node_values(fmap.apply(theta2)).ravel()
    Y = g1 + rng.standard_normal(n)
    terms = 0.5 * (Y - g2) ** 2 - 0.5 * (Y - g1) ** 2
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n))


def hellinger_constant(U: float) -> float:
    """C_U = (1 - exp(-U^2/2)) / (2 U^2)."""
    if not U > 0:
        raise ValueError("U must be > 0")
    return -math.expm1(-0.5 * U * U) / (2.0 * U * U)


@dataclass(frozen=True)
class InfoDistances:
    U: float
    c_u: float
    dist2: float           # ||G(theta1) - G(theta2)||^2_{L^2_lambda}
    kl: float
    h2: float              # 1/2 int (sqrt p1 - sqrt p2)^2
    h2_unnormalized: float  # int (sqrt p1 - sqrt p2)^2
    d2: float
    lower: float           # C_U ||dG||^2
    upper: float           # ||dG||^2 / 4
    d2_bound: float        # exp(4 U^2) ||dG||^2
    sandwich_pass: bool
    sandwich_pass_half: bool
    d2_pass: bool
    kl_le_d2: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _y_rule(n: int = 80):
    z, w = hermite_e.hermegauss(n)
    return z, w / math.sqrt(2.0 * math.pi)


def hellinger_and_renyi_bounds(theta1, theta2, fmap: ForwardMap, U: float | None = None,
                               n_y: int = 80) -> InfoDistances:
    """Hellinger and Renyi-2 distances by quadrature and the bounds relating them to ||dG||.

    The response integral at each design node is taken with ``y = G1 + z``,
    z standard normal, by Gauss-Hermite; the design integral uses the
    trapezoid weights of the map. ``sandwich_pass`` checks
    ``C_U ||dG||^2 <= h2_unnormalized <= ||dG||^2 / 4``;
    ``sandwich_pass_half`` applies the same bounds to ``h2``.
    """
    g1 = fmap.node_values(fmap.apply(theta1)).ravel()
    g2 = fmap.node_values(fmap.apply(theta2)).ravel()
    sup = float(max(np.max(np.abs(g1)), np.max(np.abs(g2))))
    if U is None:
        U = sup
    if U < sup:
        raise ValueError(f"U = {U} is below the observed sup-norm {sup}")
    U = max(U, 1e-12)
    w = fmap.quad_weights().ravel()
    delta = g2 - g1
    z, wz = _y_rule(n_y)
    ratio_half = np.exp(0.5 * (np.outer(delta, z) - 0.5 * delta[:, None] ** 2))
    hell_y = ((1.0 - ratio_half) ** 2) @ wz
    renyi_y = np.exp(-np.outer(delta, z) + 0.5 * delta[:, None] ** 2) @ wz
    dist2 = float(np.sum(w * delta ** 2))
    h2_full = float(np.sum(w * hell_y))
    d2 = float(np.log(np.sum(w * renyi_y)))
    c_u = hellinger_constant(U)
    lower, upper = c_u * dist2, 0.25 * dist2
    d2_bound = math.exp(4 * U * U) * dist2
    tol = 1e-12
    kl = 0.5 * dist2
    return InfoDistances(
        U=U, c_u=c_u, dist2=dist2, kl=kl, h2=0.5 * h2_full, h2_unnormalized=h2_full, d2=d2,
        lower=lower, upper=upper, d2_bound=d2_bound,
        sandwich_pass=bool(lower - tol <= h2_full <= upper + tol),
        sandwich_pass_half=bool(lower - tol <= 0.5 * h2_full <= upper + tol),
        d2_pass=bool(d2 <= d2_bound + tol),
        kl_le_d2=bool(kl <= d2 + tol),
    )

