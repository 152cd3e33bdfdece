"""Forward maps theta (wavelet coefficients) -> G(theta) on the observation nodes.

The parameter field is ``chi * synthesize(c)`` (the cutoff is optional),
the PDE coefficient is ``Phi(field)`` and the output is the solver's
cell-centred solution. Outputs are extended by their boundary values to a
node set ``[0, x_0, ..., x_{n-1}, 1]`` per axis; design points are
evaluated by (bi)linear interpolation on those nodes and the lambda
integrals use the trapezoid rule on the same nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ..prior import Cutoff
from ..wavelets import CoeffTree, WaveletBasis
from . import darcy, subdiffusion
from .links import LinkFunction

KINDS = ("darcy", "subdiffusion", "linear-toy")


@dataclass(frozen=True, eq=False)
class ForwardMap:
    kind: str
    basis: WaveletBasis
    link: LinkFunction | None = None
    problem: object = None
    cutoff: Cutoff | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown forward map {self.kind!r}; expected one of {KINDS}")
        if self.kind != "linear-toy":
            if self.link is None or self.problem is None:
                raise ValueError(f"{self.kind} map needs a link and a problem")
            n = getattr(self.problem, "n")
            if n != self.basis.n:
                raise ValueError(f"solver grid {n} != wavelet grid {self.basis.n}")
        if self.kind == "subdiffusion" and self.basis.d != 1:
            raise ValueError("subdiffusion is one-dimensional")
        object.__setattr__(self, "_chi", None if self.cutoff is None else self.cutoff.on_grid(self.basis))

    @property
    def d(self) -> int:
        return self.basis.d

    @property
    def n(self) -> int:
        return self.basis.n

    def _values(self, theta) -> np.ndarray:
        if isinstance(theta, CoeffTree):
            if theta.basis.size != self.basis.size or theta.basis.d != self.basis.d:
                raise ValueError("coefficient tree does not belong to this map's basis")
            return theta.values
        v = np.asarray(theta, dtype=float)
        if v.shape != (self.basis.size,):
            raise ValueError(f"coefficient vector of shape {v.shape}, expected ({self.basis.size},)")
        return v

    # parameter fields
    def theta_field(self, theta) -> np.ndarray:
        fld = self.basis.inverse(self._values(theta))
        return fld if self._chi is None else self._chi * fld

    def coefficient_field(self, theta) -> np.ndarray:
        """f_theta = Phi(theta field); the field itself for the linear toy map."""
        fld = self.theta_field(theta)
        return fld if self.link is None else self.link.apply(fld)

    def _field_vjp(self, fld, f_bar) -> np.ndarray:
        if self.link is not None:
            f_bar = f_bar * self.link.derivative(fld)
        if self._chi is not None:
            f_bar = self._chi * f_bar
        # adjoint of the synthesis; analyze carries a 1/size factor
        return self.basis.size * self.basis.forward(f_bar)

    # forward evaluation
    def _solve(self, coef, with_vjp: bool):
        if self.kind == "darcy":
            if with_vjp:
                return darcy.solve_with_adjoint(self.problem, coef)
            return darcy.solve_darcy(self.problem, coef), None
        if self.kind == "subdiffusion":
            if with_vjp:
                return subdiffusion.solve_with_adjoint(self.problem, coef)
            return subdiffusion.solve_subdiffusion(self.problem, coef), None
        return coef.copy(), (lambda bar: np.asarray(bar, dtype=float).reshape(coef.shape))

    def apply(self, theta) -> np.ndarray:
        """G(theta) on the cell-centred grid."""
        fld = self.theta_field(theta)
        coef = fld if self.link is None else self.link.apply(fld)
        return self._solve(coef, False)[0]

    def apply_with_vjp(self, theta):
        """``(G(theta), vjp)``; ``vjp(out_bar)`` is the coefficient gradient."""
        fld = self.theta_field(theta)
        coef = fld if self.link is None else self.link.apply(fld)
        out, solver_vjp = self._solve(coef, True)

        def vjp(out_bar):
            return self._field_vjp(fld, solver_vjp(out_bar))

        return out, vjp

    # observation nodes
    def nodes(self) -> np.ndarray:
        x = (np.arange(self.n) + 0.5) / self.n
        return np.concatenate([[0.0], x, [1.0]])

    def _boundary(self):
        if self.kind == "darcy":
            return 0.0, 0.0
        if self.kind == "subdiffusion":
            return self.problem.a0, self.problem.a1
        return None

    def node_values(self, out) -> np.ndarray:
        out = np.asarray(out, dtype=float).reshape(self.basis.grid_shape)
        bnd = self._boundary()
        if bnd is None:
            return np.pad(out, 1, mode="edge")
        if self.d == 1:
            return np.concatenate([[bnd[0]], out, [bnd[1]]])
        return np.pad(out, 1, mode="constant", constant_values=bnd[0])

    def node_values_vjp(self, node_bar) -> np.ndarray:
        node_bar = np.asarray(node_bar, dtype=float).reshape((self.n + 2,) * self.d)
        if self.d == 1:
            out = node_bar[1:-1].copy()
            if self.kind == "linear-toy":
                out[0] += node_bar[0]
                out[-1] += node_bar[-1]
            return out
        out = node_bar[1:-1, 1:-1].copy()
        if self.kind == "linear-toy":
            out[0, :] += node_bar[0, 1:-1]
            out[-1, :] += node_bar[-1, 1:-1]
            out[:, 0] += node_bar[1:-1, 0]
            out[:, -1] += node_bar[1:-1, -1]
            out[0, 0] += node_bar[0, 0]
            out[0, -1] += node_bar[0, -1]
            out[-1, 0] += node_bar[-1, 0]
            out[-1, -1] += node_bar[-1, -1]
        return out

    def quad_weights(self) -> np.ndarray:
        """Trapezoid weights of the uniform measure on the node grid (sum 1)."""
        x = self.nodes()
        w = np.zeros_like(x)
        dx = np.diff(x)
        w[:-1] += dx / 2
        w[1:] += dx / 2
        if self.d == 1:
            return w
        return np.outer(w, w)

    def l2_lambda(self, node_diff) -> float:
        node_diff = np.asarray(node_diff, dtype=float).reshape((self.n + 2,) * self.d)
        return float(np.sqrt(np.sum(self.quad_weights() * node_diff ** 2)))

    def interp_matrix(self, X) -> sparse.csr_matrix:
        """Sparse (N, n_nodes) matrix of (bi)linear interpolation weights."""
        X = np.asarray(X, dtype=float)
        if self.d == 1:
            X = X.reshape(-1)
            idx, t = _locate(self.nodes(), X)
            rows = np.repeat(np.arange(len(X)), 2)
            cols = np.stack([idx, idx + 1], axis=1).ravel()
            vals = np.stack([1 - t, t], axis=1).ravel()
            return sparse.csr_matrix((vals, (rows, cols)), shape=(len(X), self.n + 2))
        X = X.reshape(-1, 2)
        m = self.n + 2
        i, ti = _locate(self.nodes(), X[:, 0])
        j, tj = _locate(self.nodes(), X[:, 1])
        rows = np.repeat(np.arange(len(X)), 4)
        cols = np.stack([i * m + j, i * m + j + 1, (i + 1) * m + j, (i + 1) * m + j + 1], axis=1).ravel()
        vals = np.stack([(1 - ti) * (1 - tj), (1 - ti) * tj, ti * (1 - tj), ti * tj], axis=1).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(len(X), m * m))

    def predict(self, theta, X) -> np.ndarray:
        return self.interp_matrix(X) @ self.node_values(self.apply(theta)).ravel()

    def sample_design(self, rng: np.random.Generator, N: int) -> np.ndarray:
        return rng.random((N,) if self.d == 1 else (N, 2))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": self.d, "j_max": self.basis.j_max, "family": self.basis.family,
               "cutoff": None if self.cutoff is None else
               {"inner": list(self.cutoff.inner), "outer": list(self.cutoff.outer)}}
        if self.link is not None:
            out["link"] = self.link.to_dict()
        if self.kind == "darcy":
            g = self.problem.g
            out["problem"] = {"g": float(g) if np.ndim(g) == 0 else "array", "k_min": self.problem.k_min}
        elif self.kind == "subdiffusion":
            pr = self.problem
            out["problem"] = {"m": pr.m, "beta": pr.beta, "T": pr.T, "a0": pr.a0, "a1": pr.a1,
                              "f": float(pr.f) if np.ndim(pr.f) == 0 else "array",
                              "u0": float(pr.u0) if np.ndim(pr.u0) == 0 else "array", "m0": pr.m0}
        return out


def _locate(nodes, x):
    if np.any((x < 0) | (x > 1)):
        raise ValueError("design points must lie in [0, 1]")
    idx = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, len(nodes) - 2)
    t = (x - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
    return idx, t


def darcy_map(d: int = 1, j_max: int = 8, family: str = "haar", g=-8.0, k_min: float = 0.5,
              cutoff: Cutoff | None = Cutoff()) -> ForwardMap:
    basis = WaveletBasis(d=d, j_max=j_max, family=family)
    prob = darcy.DarcyProblem(d=d, n=basis.n, g=g, k_min=k_min)
    return ForwardMap("darcy", basis, LinkFunction("darcy-softplus", k_min=k_min), prob, cutoff)


def subdiffusion_map(j_max: int = 7, family: str = "haar", m: int = 64, beta: float = 0.5, T: float = 1.0,
                     f=1.0, u0=1.0, a0: float = 1.0, a1: float = 1.0, m0: float = 2.0,
                     cutoff: Cutoff | None = Cutoff()) -> ForwardMap:
    basis = WaveletBasis(d=1, j_max=j_max, family=family)
    prob = subdiffusion.SubdiffusionProblem(n=basis.n, m=m, beta=beta, T=T, f=f, u0=u0, a0=a0, a1=a1, m0=m0)
    return ForwardMap("subdiffusion", basis, LinkFunction("logistic", m0=m0), prob, cutoff)


def linear_toy_map(d: int = 1, j_max: int = 6, family: str = "haar", cutoff: Cutoff | None = None) -> ForwardMap:
    """G(theta) = theta field; the observation is the parameter itself."""
    return ForwardMap("linear-toy", WaveletBasis(d=d, j_max=j_max, family=family), cutoff=cutoff)


def forward_apply(fmap: ForwardMap, theta) -> np.ndarray:
    return fmap.apply(theta)
