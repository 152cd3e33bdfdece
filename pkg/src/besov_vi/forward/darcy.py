"""Cell-centred finite-volume solver for div(f grad u) = g with u = 0 on the boundary.

Unknowns sit at cell centres ``(k + 1/2) h``. Interior face coefficients are
harmonic means of the neighbouring cells; boundary faces see the Dirichlet
value at half a cell distance. The operator is assembled as
``A = -G^T diag(t) G`` where ``G`` takes face differences and ``t`` holds
face transmissibilities, so the adjoint gradient is a one-liner.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

ELLIPTIC_MARGIN = 1e-8


class ConditioningError(ValueError):
    """Coefficient field violates the ellipticity margin."""


@dataclass(frozen=True, eq=False)
class DarcyProblem:
    d: int = 1
    n: int = 256
    g: np.ndarray | float = -8.0
    k_min: float = 0.0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("Darcy problem supports d in {1, 2}")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two, got {self.n}")
        src = np.broadcast_to(np.asarray(self.g, dtype=float), self.shape)
        if not np.all(np.isfinite(src)):
            raise ValueError("source g must be finite")

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def source(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.g, dtype=float), self.shape).ravel()

    def face_operator(self) -> sparse.csr_matrix:
        """Face-difference matrix G (faces x cells) including boundary faces."""
        if "G" not in self._cache:
            self._cache["G"] = _face_operator(self.d, self.n)
        return self._cache["G"]


def _diff_1d(n: int) -> sparse.csr_matrix:
    # face j sits between cell j-1 and cell j; faces 0 and n are boundary faces
    rows = np.concatenate([np.arange(1, n + 1), np.arange(0, n)])
    cols = np.concatenate([np.arange(0, n), np.arange(0, n)])
    vals = np.concatenate([-np.ones(n), np.ones(n)])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))


def _face_operator(d: int, n: int) -> sparse.csr_matrix:
    D = _diff_1d(n)
    if d == 1:
        return D
    eye = sparse.identity(n, format="csr")
    # cells flattened row-major: index i * n + j with i along x1
    gx = sparse.kron(D, eye, format="csr")
    gy = sparse.kron(eye, D, format="csr")
    return sparse.vstack([gx, gy], format="csr")


def _face_pairs(d: int, n: int):
    """Neighbour cells (left, right) per face; -1 marks the outside."""
    left = np.arange(-1, n)
    right = np.arange(0, n + 1)
    right[-1] = -1
    if d == 1:
        return left, right
    idx = np.arange(n * n).reshape(n, n)
    pad = np.full((n + 2, n), -1)
    pad[1:-1] = idx
    lx, rx = pad[:-1].ravel(), pad[1:].ravel()
    pad = np.full((n, n + 2), -1)
    pad[:, 1:-1] = idx
    ly, ry = pad[:, :-1].ravel(), pad[:, 1:].ravel()
    return np.concatenate([lx, ly]), np.concatenate([rx, ry])


def transmissibility(prob: DarcyProblem, f: np.ndarray):
    """Face transmissibilities and their derivatives wrt the two neighbour cells."""
    key = "pairs"
    if key not in prob._cache:
        prob._cache[key] = _face_pairs(prob.d, prob.n)
    left, right = prob._cache[key]
    fl = np.where(left >= 0, f[np.maximum(left, 0)], 0.0)
    fr = np.where(right >= 0, f[np.maximum(right, 0)], 0.0)
    inv_h2 = 1.0 / prob.h ** 2
    inner = (left >= 0) & (right >= 0)
    s = np.where(inner, fl + fr, 1.0)
    t = np.where(inner, 2.0 * fl * fr / s, 2.0 * (fl + fr)) * inv_h2
    dl = np.where(inner, 2.0 * fr * fr / s ** 2, np.where(left >= 0, 2.0, 0.0)) * inv_h2
    dr = np.where(inner, 2.0 * fl * fl / s ** 2, np.where(right >= 0, 2.0, 0.0)) * inv_h2
    return t, dl, dr, left, right


def assemble(prob: DarcyProblem, f: np.ndarray) -> sparse.csc_matrix:
    f = np.asarray(f, dtype=float).ravel()
    G = prob.face_operator()
    t = transmissibility(prob, f)[0]
    return (-(G.T @ sparse.diags(t) @ G)).tocsc()


def _check_field(prob: DarcyProblem, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != prob.shape and f.size != prob.n ** prob.d:
        raise ValueError(f"coefficient shape {f.shape} does not match grid {prob.shape}")
    f = f.ravel()
    if not np.all(np.isfinite(f)):
        raise ConditioningError("coefficient field has non-finite values")
    lo = float(f.min())
    if lo < prob.k_min + ELLIPTIC_MARGIN:
        raise ConditioningError(
            f"coefficient min {lo:.3e} below ellipticity margin k_min + {ELLIPTIC_MARGIN:g} = "
            f"{prob.k_min + ELLIPTIC_MARGIN:.3e}")
    return f


def _factor_1d(t):
    # -A is tridiagonal SPD: diagonal t_j + t_{j+1}, off-diagonal -t_j on interior faces
    n = len(t) - 1
    ab = np.empty((2, n))
    ab[1] = t[:-1] + t[1:]
    ab[0, 0] = 0.0
    ab[0, 1:] = -t[1:-1]
    return linalg.cholesky_banded(ab)


def _grad_1d(x):
    # face differences x_j - x_{j-1} with zero outside the domain
    return np.diff(x, prepend=0.0, append=0.0)


def solve_darcy(prob: DarcyProblem, f, g=None) -> np.ndarray:
    """Solution u on the cell-centred grid (shape ``prob.shape``)."""
    f = _check_field(prob, f)
    rhs = prob.source() if g is None else np.broadcast_to(np.asarray(g, dtype=float), prob.shape).ravel()
    if prob.d == 1:
        chol = _factor_1d(transmissibility(prob, f)[0])
        return -linalg.cho_solve_banded((chol, False), rhs)
    A = assemble(prob, f)
    u = splinalg.spsolve(A, rhs)
    return np.asarray(u).reshape(prob.shape)


def residual(prob: DarcyProblem, f, u, g=None) -> float:
    f = _check_field(prob, f)
    rhs = prob.source() if g is None else np.broadcast_to(np.asarray(g, dtype=float), prob.shape).ravel()
    return float(np.max(np.abs(assemble(prob, f) @ np.ravel(u) - rhs)))


def solve_with_adjoint(prob: DarcyProblem, f):
    """Solve once and return ``(u, vjp)`` where ``vjp(u_bar)`` gives d/d f."""
    f = _check_field(prob, f)
    t, dl, dr, left, right = transmissibility(prob, f)
    if prob.d == 1:
        chol = _factor_1d(t)
        u = -linalg.cho_solve_banded((chol, False), prob.source())
        gu = _grad_1d(u)

        def vjp_1d(u_bar):
            lam = -linalg.cho_solve_banded((chol, False), np.asarray(u_bar, dtype=float).ravel())
            dt = _grad_1d(lam) * gu
            return dt[:-1] * dr[:-1] + dt[1:] * dl[1:]

        return u, vjp_1d
    G = prob.face_operator()
    A = (-(G.T @ sparse.diags(t) @ G)).tocsc()
    lu = splinalg.splu(A)
    u = lu.solve(prob.source())

    def vjp(u_bar):
        lam = lu.solve(np.asarray(u_bar, dtype=float).ravel())  # A is symmetric
        dt = (G @ lam) * (G @ u)
        out = np.zeros_like(f)
        np.add.at(out, left[left >= 0], (dt * dl)[left >= 0])
        np.add.at(out, right[right >= 0], (dt * dr)[right >= 0])
        return out.reshape(prob.shape)

    return u.reshape(prob.shape), vjp
