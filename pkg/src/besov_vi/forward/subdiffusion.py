"""L1 time stepping for the Caputo subdiffusion problem

    d_t^beta u - u_xx + q u = f  on (0, 1) x (0, T],
    u(0, t) = a0,  u(1, t) = a1,  u(., 0) = u0.

Space uses the same cell-centred grid as the wavelet basis with the
Dirichlet values imposed half a cell outside the first and last centre.
With ``b_k = (k+1)^{1-beta} - k^{1-beta}`` the L1 step reads

    c (u^j - u^{j-1}) + c sum_{k=1}^{j-1} b_k (u^{j-k} - u^{j-k-1}) + (A + Q) u^j = f,

``c = tau^{-beta} / Gamma(2 - beta)``, which rearranges to

    M u^j = f + c sum_{i=1}^{j-1} w_{j-i} u^i + c b_{j-1} u^0,   w_k = b_{k-1} - b_k.

``M = c I + A + Q`` is the same at every step and is factored once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg


@dataclass(frozen=True, eq=False)
class SubdiffusionProblem:
    n: int = 128
    m: int = 128
    beta: float = 0.5
    T: float = 1.0
    f: np.ndarray | float = 1.0
    u0: np.ndarray | float = 1.0
    a0: float = 1.0
    a1: float = 1.0
    m0: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"fractional order beta must lie in (0, 1), got {self.beta}")
        if not self.T > 0:
            raise ValueError("terminal time T must be > 0")
        if self.m < 1:
            raise ValueError("number of time steps must be >= 1")
        if self.n < 2:
            raise ValueError("need at least two grid cells")
        for name in ("f", "u0"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.n,))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def tau(self) -> float:
        return self.T / self.m

    def grid(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) / self.n

    def l1_weights(self) -> np.ndarray:
        k = np.arange(self.m + 1, dtype=float)
        e = 1.0 - self.beta
        return (k + 1.0) ** e - k ** e

    def l1_constant(self) -> float:
        return self.tau ** (-self.beta) / math.gamma(2.0 - self.beta)


def laplacian_bands(prob: SubdiffusionProblem):
    """Diagonal, off-diagonal and boundary load of the discrete -u_xx."""
    n, h2 = prob.n, prob.h ** 2
    diag = np.full(n, 2.0 / h2)
    diag[0] = diag[-1] = 3.0 / h2
    off = np.full(n - 1, -1.0 / h2)
    load = np.zeros(n)
    load[0] = 2.0 * prob.a0 / h2
    load[-1] += 2.0 * prob.a1 / h2
    return diag, off, load


def _check_q(prob: SubdiffusionProblem, q) -> np.ndarray:
    q = np.asarray(q, dtype=float).ravel()
    if q.shape != (prob.n,):
        raise ValueError(f"potential has {q.size} values, grid has {prob.n}")
    if not np.all(np.isfinite(q)) or np.any(q < 0) or np.any(q >= prob.m0):
        raise ValueError(f"potential must satisfy 0 <= q < m0 = {prob.m0}")
    return q


def _factor(prob, q):
    c = prob.l1_constant()
    diag, off, load = laplacian_bands(prob)
    # upper form for cholesky_banded: row 0 super-diagonal, row 1 diagonal
    ab = np.zeros((2, prob.n))
    ab[0, 1:] = off
    ab[1] = diag + q + c
    return linalg.cholesky_banded(ab), c, load


def _march(prob, q):
    """Full time history, shape (m + 1, n)."""
    chol, c, load = _factor(prob, q)
    b = prob.l1_weights()
    w = b[:-1] - b[1:]  # w[k - 1] = b_{k-1} - b_k
    rhs0 = np.broadcast_to(np.asarray(prob.f, dtype=float), (prob.n,)) + load
    U = np.empty((prob.m + 1, prob.n))
    U[0] = np.broadcast_to(np.asarray(prob.u0, dtype=float), (prob.n,))
    for j in range(1, prob.m + 1):
        hist = c * b[j - 1] * U[0]
        if j > 1:
            # sum_{i=1}^{j-1} w_{j-i} u^i
            hist = hist + c * (w[j - 2::-1][: j - 1] @ U[1:j])
        U[j] = linalg.cho_solve_banded((chol, False), rhs0 + hist)
    return U, chol, c, w


def solve_subdiffusion(prob: SubdiffusionProblem, q) -> np.ndarray:
    """Terminal slice u(., T) on the cell-centred grid."""
    q = _check_q(prob, q)
    return _march(prob, q)[0][-1]


def solve_history(prob: SubdiffusionProblem, q) -> np.ndarray:
    return _march(prob, _check_q(prob, q))[0]


def solve_with_adjoint(prob: SubdiffusionProblem, q):
    """Return ``(u(T), vjp)`` where ``vjp(u_bar)`` is the gradient wrt q."""
    q = _check_q(prob, q)
    U, chol, c, w = _march(prob, q)
    m = prob.m

    def vjp(u_bar):
        lam = np.zeros((m + 1, prob.n))
        lam[m] = linalg.cho_solve_banded((chol, False), np.asarray(u_bar, dtype=float).ravel())
        for i in range(m - 1, 0, -1):
            # M lam_i = c sum_{j>i} w_{j-i} lam_j
            src = c * (w[: m - i] @ lam[i + 1:m + 1])
            lam[i] = linalg.cho_solve_banded((chol, False), src)
        return -np.sum(lam[1:] * U[1:], axis=0)

    return U[-1], vjp
