"""Periodized orthonormal wavelet analysis on dyadic grids over [0,1]^d.

Coefficients are stored flat in level-major order: the single scaling
coefficient (level -1) first, then level 0, 1, ... up to ``j_max - 1``.
In two dimensions each level holds the three tensor-product detail
orientations (LH, HL, HH), orientation-major, row-major inside.

Coefficients are normalized against the grid L^2 norm
``sqrt(mean(f**2))`` so that a constant function 1 has scaling
coefficient 1 and Parseval holds exactly.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from pathlib import Path

import mpmath
import numpy as np


@functools.lru_cache(maxsize=None)
def daubechies_lowpass(n_moments: int) -> np.ndarray:
    """Lowpass filter of the Daubechies family with ``n_moments`` vanishing moments.

    Obtained by spectral factorization of the half-band polynomial with
    the minimum-phase root selection. ``n_moments=1`` is the Haar filter.
    """
    if n_moments < 1:
        raise ValueError("n_moments must be >= 1")
    if n_moments == 1:
        return np.full(2, 1.0 / math.sqrt(2.0))
    N = n_moments
    with mpmath.workdps(80):
        # P(y) = sum_k binom(N-1+k, k) y^k, y = sin^2(w/2)
        coeffs = [mpmath.binomial(N - 1 + k, k) for k in reversed(range(N))]
        yroots = mpmath.polyroots(coeffs, maxsteps=2000, extraprec=400)
        zroots = []
        for y in yroots:
            b = 2 - 4 * y
            disc = mpmath.sqrt(b * b - 4)
            z1, z2 = (b + disc) / 2, (b - disc) / 2
            zroots.append(z1 if abs(z1) < 1 else z2)
        poly = [mpmath.mpc(1)]
        factors = [(mpmath.mpc(1), mpmath.mpc(1))] * N + [(-z, mpmath.mpc(1)) for z in zroots]
        for c0, c1 in factors:
            nxt = [mpmath.mpc(0)] * (len(poly) + 1)
            for i, a in enumerate(poly):
                nxt[i] += a * c0
                nxt[i + 1] += a * c1
            poly = nxt
        total = sum(poly)
        h = [mpmath.re(c / total) * mpmath.sqrt(2) for c in poly]
    return np.array([float(v) for v in reversed(h)])


def _parse_family(family: str) -> int:
    fam = family.lower()
    if fam == "haar":
        return 1
    if fam.startswith("db") and fam[2:].isdigit():
        return int(fam[2:])
    raise ValueError(f"unknown wavelet family {family!r} (use 'haar' or 'dbN')")


# 1-D grids up to this size use a cached dense synthesis matrix
DENSE_MAX = 1024


def _highpass(h: np.ndarray) -> np.ndarray:
    L = len(h)
    return np.array([(-1) ** j * h[L - 1 - j] for j in range(L)])


def _analysis_step(x, h, g):
    m = x.shape[-1]
    L = len(h)
    idx = (2 * np.arange(m // 2)[:, None] + np.arange(L)[None, :]) % m
    xs = x[..., idx]
    return xs @ h, xs @ g


def _synthesis_step(a, d, h, g):
    half = a.shape[-1]
    m = 2 * half
    out = np.zeros(a.shape[:-1] + (m,))
    base = 2 * np.arange(half)
    for j in range(len(h)):
        out[..., (base + j) % m] += h[j] * a + g[j] * d
    return out


class WaveletBasis:
    """Periodized orthonormal wavelet basis on ``n = 2**j_max`` cells per axis.

    Grid nodes are cell centres ``(k + 1/2) / n``.
    """

    def __init__(self, d: int = 1, j_max: int = 10, family: str = "haar"):
        if d not in (1, 2):
            raise ValueError("only d = 1 or d = 2 is supported")
        if j_max < 1:
            raise ValueError("j_max must be >= 1")
        self.d = d
        self.j_max = j_max
        self.family = family
        self.n_moments = _parse_family(family)
        self.n = 2 ** j_max
        self.size = self.n ** d
        self._h = daubechies_lowpass(self.n_moments)
        self._g = _highpass(self._h)
        c0 = 1 if d == 1 else 3
        levels = [np.array([-1])]
        translates = [np.array([0])]
        for lev in range(j_max):
            count = c0 * 2 ** (lev * d)
            levels.append(np.full(count, lev))
            translates.append(np.arange(count))
        self.levels = np.concatenate(levels)
        self.translates = np.concatenate(translates)
        self.levels.setflags(write=False)
        self.translates.setflags(write=False)
        self.c0 = c0

    # regularity declared as the number of vanishing moments
    @property
    def regularity(self) -> int:
        return self.n_moments

    @property
    def max_level(self) -> int:
        return self.j_max - 1

    def level_count(self, lev: int) -> int:
        if lev == -1:
            return 1
        return self.c0 * 2 ** (lev * self.d)

    def level_slice(self, lev: int) -> slice:
        if lev == -1:
            return slice(0, 1)
        start = 2 ** (lev * self.d)
        return slice(start, start + self.level_count(lev))

    def flat_index(self, lev: int, r: int) -> int:
        if not 0 <= r < self.level_count(lev):
            raise IndexError(f"translate {r} out of range for level {lev}")
        return self.level_slice(lev).start + r

    def indices(self):
        return list(zip(self.levels.tolist(), self.translates.tolist()))

    def grid(self):
        x = (np.arange(self.n) + 0.5) / self.n
        if self.d == 1:
            return x
        return np.meshgrid(x, x, indexing="ij")

    @property
    def grid_shape(self):
        return (self.n,) * self.d

    def level_factor(self, s: float) -> np.ndarray:
        """Per-coefficient factor ``2**(l*s)``; the scaling level gets 1."""
        lev = np.maximum(self.levels, 0)
        out = np.power(2.0, lev * s)
        out[self.levels < 0] = 1.0
        return out

    # raw transforms on arrays; leading axes are batch axes
    def forward(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        shape = self.grid_shape
        if f.shape[f.ndim - self.d:] != shape:
            raise ValueError(f"grid function shape {f.shape} does not match grid {shape}")
        scale = math.sqrt(self.size)
        if self.d == 1 and self.n <= DENSE_MAX:
            return f @ self._dense() / self.size
        if self.d == 1:
            out = np.empty(f.shape)
            a = f
            m = self.n
            while m > 1:
                a, det = _analysis_step(a, self._h, self._g)
                out[..., m // 2:m] = det
                m //= 2
            out[..., 0:1] = a
            return out / scale
        batch = f.shape[:-2]
        parts = []
        a = f
        m = self.n
        while m > 1:
            lo, hi = _analysis_step(a, self._h, self._g)
            ll, lh = _analysis_step(np.swapaxes(lo, -1, -2), self._h, self._g)
            hl, hh = _analysis_step(np.swapaxes(hi, -1, -2), self._h, self._g)
            ll = np.swapaxes(ll, -1, -2)
            det = np.stack([np.swapaxes(lh, -1, -2), np.swapaxes(hl, -1, -2),
                            np.swapaxes(hh, -1, -2)], axis=-3)
            parts.append(det.reshape(batch + (-1,)))
            a = ll
            m //= 2
        parts.append(a.reshape(batch + (1,)))
        return np.concatenate(parts[::-1], axis=-1) / scale

    def _dense(self) -> np.ndarray:
        # synthesis matrix (grid x coefficients) built once by the fast transform
        if getattr(self, "_dense_synth", None) is None:
            eye = np.eye(self.size)
            a = eye[:, 0:1]
            m = 2
            while m <= self.n:
                a = _synthesis_step(a, eye[:, m // 2:m], self._h, self._g)
                m *= 2
            self._dense_synth = np.ascontiguousarray((a * math.sqrt(self.size)).T)
        return self._dense_synth

    def inverse(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        if c.shape[-1] != self.size:
            raise ValueError(f"coefficient vector length {c.shape[-1]} != {self.size}")
        scale = math.sqrt(self.size)
        batch = c.shape[:-1]
        if self.d == 1 and self.n <= DENSE_MAX:
            return c @ self._dense().T
        if self.d == 1:
            a = c[..., 0:1]
            m = 2
            while m <= self.n:
                a = _synthesis_step(a, c[..., m // 2:m], self._h, self._g)
                m *= 2
            return a * scale
        a = c[..., 0:1].reshape(batch + (1, 1))
        for lev in range(self.j_max):
            half = 2 ** lev
            det = c[..., self.level_slice(lev)].reshape(batch + (3, half, half))
            lh, hl, hh = (np.swapaxes(det[..., k, :, :], -1, -2) for k in range(3))
            lo = np.swapaxes(_synthesis_step(np.swapaxes(a, -1, -2), lh, self._h, self._g), -1, -2)
            hi = np.swapaxes(_synthesis_step(hl, hh, self._h, self._g), -1, -2)
            a = _synthesis_step(lo, hi, self._h, self._g)
        return a * scale

    def __repr__(self):
        return f"WaveletBasis(d={self.d}, j_max={self.j_max}, family={self.family!r})"


@dataclass(frozen=True)
class CoeffTree:
    """Wavelet coefficients of one function, tied to its basis."""

    basis: WaveletBasis
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.basis.size,):
            raise ValueError(f"expected {self.basis.size} coefficients, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("coefficients must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, basis: WaveletBasis) -> "CoeffTree":
        return cls(basis, np.zeros(basis.size))

    @classmethod
    def unit(cls, basis: WaveletBasis, lev: int, r: int) -> "CoeffTree":
        v = np.zeros(basis.size)
        v[basis.flat_index(lev, r)] = 1.0
        return cls(basis, v)

    def level(self, lev: int) -> np.ndarray:
        return self.values[self.basis.level_slice(lev)]

    def __getitem__(self, key):
        lev, r = key
        return self.values[self.basis.flat_index(lev, r)]

    def with_values(self, values) -> "CoeffTree":
        return CoeffTree(self.basis, values)

    def _check(self, other):
        if other.basis is not self.basis and (
            other.basis.size != self.basis.size or other.basis.family != self.basis.family
        ):
            raise ValueError("coefficient trees live on different bases")

    def __add__(self, other):
        self._check(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, k):
        return self.with_values(self.values * float(k))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)


def analyze(f, basis: WaveletBasis) -> CoeffTree:
    """Coefficients of the grid function ``f`` in ``basis``."""
    f = np.asarray(f, dtype=float)
    if f.shape != basis.grid_shape:
        if f.size == basis.size and basis.d == 1:
            f = f.reshape(basis.grid_shape)
        else:
            raise ValueError(f"grid function of shape {f.shape} does not match {basis.grid_shape}")
    return CoeffTree(basis, basis.forward(f))


def synthesize(c: CoeffTree) -> np.ndarray:
    return c.basis.inverse(c.values)


def besov_norm(c: CoeffTree, alpha: float, p: float) -> float:
    """Sequence-space B^alpha_pp norm with weights 2^{p l (alpha + d/2 - d/p)}."""
    if p < 1:
        raise ValueError("besov_norm requires p >= 1")
    if alpha < 0:
        raise ValueError("besov_norm requires alpha >= 0")
    b = c.basis
    w = b.level_factor(p * (alpha + b.d / 2 - b.d / p))
    return float(np.sum(w * np.abs(c.values) ** p) ** (1.0 / p))


def sobolev_dual_norm(c: CoeffTree, kappa: float) -> float:
    """Sequence surrogate for the (H^kappa)* norm."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    w = c.basis.level_factor(-2.0 * kappa)
    return float(np.sqrt(np.sum(w * c.values ** 2)))


def project(c: CoeffTree, J: int) -> CoeffTree:
    """Zero every coefficient above level ``J``."""
    if not -1 <= J <= c.basis.j_max:
        raise ValueError(f"projection level {J} outside [-1, {c.basis.j_max}]")
    v = np.where(c.basis.levels <= J, c.values, 0.0)
    return c.with_values(v)


def write_coeff_csv(c: CoeffTree, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "r", "value"])
        for (lev, r), v in zip(c.basis.indices(), c.values):
            w.writerow([lev, r, repr(float(v))])


def read_coeff_csv(path, basis: WaveletBasis) -> CoeffTree:
    values = np.zeros(basis.size)
    seen = np.zeros(basis.size, dtype=bool)
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            k = basis.flat_index(int(row["l"]), int(row["r"]))
            values[k] = float(row["value"])
            seen[k] = True
    if not seen.all():
        raise ValueError(f"{path}: missing {int((~seen).sum())} coefficients for {basis!r}")
    return CoeffTree(basis, values)
