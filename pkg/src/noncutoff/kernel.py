"""Collision kernel B(|u|, theta) = |u|^gamma * b(cos theta) for variable hard potentials.

The angular part is a two-branch power law on the half spheres: it blows up
at grazing angles (cos theta -> 1) and vanishes at head-on collisions
(cos theta -> -1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CollisionParams:
    d: int = 2
    gamma: float = 1.0
    nu: float = 0.5
    c_pos: float = 1.0
    c_neg: float = 1.0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension d must be 2 or 3, got {self.d}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must satisfy 0 < gamma <= 1, got {self.gamma}")
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must satisfy 0 < nu <= 1, got {self.nu}")
        if self.c_pos <= 0.0 or self.c_neg <= 0.0:
            raise ValueError("c_pos and c_neg must be positive")

    @property
    def pos_exponent(self) -> float:
        """Exponent of |sin theta| on the grazing (cos > 0) branch."""
        return -(self.d - 1) - self.nu

    @property
    def neg_exponent(self) -> float:
        return 1.0 + self.gamma + self.nu


def angular_from_sin(sin_theta, cos_positive, params: CollisionParams):
    """b evaluated from |sin theta| and the sign of cos theta (no range checks)."""
    s = np.abs(np.asarray(sin_theta, dtype=float))
    with np.errstate(divide="ignore"):
        pos = params.c_pos * s ** params.pos_exponent
    neg = params.c_neg * s ** params.neg_exponent
    return np.where(cos_positive, pos, neg)


def angular_b(cos_theta, params: CollisionParams):
    """Angular kernel b(cos theta).

    Returns +inf at cos theta = 1 exactly, where the grazing branch is singular.
    Accepts scalars or arrays.
    """
    c = np.asarray(cos_theta, dtype=float)
    if np.any(np.abs(c) > 1.0):
        raise ValueError("cos_theta must lie in [-1, 1]")
    sin_theta = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    out = angular_from_sin(sin_theta, c > 0.0, params)
    if out.ndim == 0:
        return float(out)
    return out


def collision_kernel(speed, cos_theta, params: CollisionParams):
    """B(|u|, theta) = |u|^gamma b(cos theta)."""
    return np.asarray(speed, dtype=float) ** params.gamma * angular_b(cos_theta, params)


def _gauss_panels(edges, order=16):
    x, w = np.polynomial.legendre.leggauss(order)
    a = np.asarray(edges[:-1])[:, None]
    b = np.asarray(edges[1:])[:, None]
    nodes = 0.5 * (b - a) * x + 0.5 * (b + a)
    weights = 0.5 * (b - a) * w
    return nodes, weights


def integrability_probe(params: CollisionParams, beta: float, levels=range(1, 41)):
    """Truncated values of int_{theta_k}^{pi} b(cos t) sin^beta(t) sin^{d-2}(t) dt.

    Level k truncates the singular end at theta_k = pi * 2**-k. Each dyadic
    panel is integrated with Gauss-Legendre, so the sequence is exact up to
    rounding and its behaviour reflects only the integrand: it converges iff
    beta > nu.
    """
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    levels = [int(k) for k in levels]
    if sorted(levels) != levels or len(set(levels)) != len(levels):
        raise ValueError("levels must be strictly increasing")
    kmax = levels[-1]
    edges = np.pi * 2.0 ** -np.arange(kmax, -1, -1, dtype=float)
    nodes, weights = _gauss_panels(edges)
    s = np.sin(nodes)
    vals = angular_from_sin(s, np.cos(nodes) > 0.0, params) * s ** beta * s ** (params.d - 2)
    panel = (vals * weights).sum(axis=1)  # panel j covers [pi 2^{-(kmax-j)}, pi 2^{-(kmax-j-1)}]
    # contribution of theta in [pi/2^k, pi] is the sum of the last k panels
    cumulative = np.concatenate([[0.0], np.cumsum(panel[::-1])])
    return np.array([cumulative[k] for k in levels])


def tau_relation(params: CollisionParams) -> tuple[float, float]:
    """Exponents (tau_plus, tau_minus) of |sin theta| on the two branches.

    Their sum is -d + 2 + gamma, which is what makes the two branches give the
    same power of |v' - v| in the Carleman kernel.
    """
    tau_plus = -params.d + 1.0 - params.nu
    tau_minus = 1.0 + params.gamma + params.nu
    expected = -params.d + 2.0 + params.gamma
    assert abs(tau_plus + tau_minus - expected) <= 1e-12 * max(1.0, abs(expected))
    return tau_plus, tau_minus
