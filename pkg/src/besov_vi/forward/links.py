"""Link functions mapping an unconstrained field theta to a PDE coefficient.

Both links satisfy Phi(0) = 1 and are smooth, strictly increasing
bijections onto their range with bounded derivatives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class LinkFunction:
    """``kind`` is ``"darcy-softplus"`` (range (k_min, inf)) or ``"logistic"`` (range (0, m0))."""

    kind: str = "darcy-softplus"
    k_min: float = 0.0
    m0: float = 2.0

    def __post_init__(self):
        if self.kind == "darcy-softplus":
            if not 0.0 <= self.k_min < 1.0:
                raise ValueError(f"k_min must lie in [0, 1), got {self.k_min}")
        elif self.kind == "logistic":
            if not self.m0 > 1.0:
                raise ValueError(f"m0 must exceed 1, got {self.m0}")
        else:
            raise ValueError(f"unknown link kind {self.kind!r}")

    @property
    def range(self):
        if self.kind == "darcy-softplus":
            return self.k_min, math.inf
        return 0.0, self.m0

    def apply(self, theta):
        t = np.asarray(theta, dtype=float)
        if self.kind == "darcy-softplus":
            # log(1 + 2^t) / log 2, written to stay finite for large |t|
            return self.k_min + (1.0 - self.k_min) * np.logaddexp(0.0, t * LOG2) / LOG2
        m0 = self.m0
        return m0 * special.expit(t - math.log(m0 - 1.0))

    def derivative(self, theta):
        t = np.asarray(theta, dtype=float)
        if self.kind == "darcy-softplus":
            return (1.0 - self.k_min) * special.expit(t * LOG2)
        s = special.expit(t - math.log(self.m0 - 1.0))
        return self.m0 * s * (1.0 - s)

    def inverse(self, f):
        f = np.asarray(f, dtype=float)
        lo, hi = self.range
        if np.any(~(f > lo)) or np.any(~(f < hi)):
            raise ValueError(f"link inverse needs values strictly inside ({lo}, {hi})")
        if self.kind == "darcy-softplus":
            s = (f - self.k_min) / (1.0 - self.k_min) * LOG2
            # log(expm1(s)) = s + log(-expm1(-s)), stable for large s
            return (s + np.log(-np.expm1(-s))) / LOG2
        return special.logit(f / self.m0) + math.log(self.m0 - 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k_min": self.k_min, "m0": self.m0}


def link_apply(link: LinkFunction, theta):
    return link.apply(theta)


def link_inverse(link: LinkFunction, f):
    return link.inverse(f)
