"""Carleman form of the gain structure: the kernel K_f, its checks, and the cone bounds.

K_f(v, v') integrates f over the hyperplane through v orthogonal to v' - v:

    K_f(v, v') = 2^{d-1} / |v' - v| * int_{w . (v'-v) = 0} f(v + w) B(r, theta) r^{2-d} dw,

with r^2 = |v' - v|^2 + |w|^2 and cos(theta / 2) = |w| / r. In two dimensions the
hyperplane is a line and everything here runs in seconds; three dimensions use a
planar midpoint rule and are meant for small grids.
"""
from __future__ import annotations

import functools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .grid import Distribution, LevelSet, interp2, interp3, interpolate
from .kernel import CollisionParams, angular_from_sin
from .weights import bracket

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperplaneQuad:
    """Midpoint rule on the hyperplane: n_radial nodes per axis over [-w_max, w_max].

    w_max=None means "reach every point of the cube": in two dimensions the nodes
    then cover just the chord of the cube, otherwise the box L sqrt(d) + |v|.
    A fixed w_max keeps node positions relative to v, so shifting f and v together
    reproduces K_f exactly.
    """

    n_radial: int = 256
    w_max: float | None = None

    def __post_init__(self):
        if self.n_radial < 64:
            raise ValueError("n_radial must be at least 64")

    def reach(self, f: Distribution, v) -> float:
        need = f.grid.L + float(np.linalg.norm(v))
        if self.w_max is None:
            return f.grid.L * math.sqrt(f.grid.d) + float(np.linalg.norm(v))
        if self.w_max < need:
            warnings.warn(f"w_max={self.w_max} is below L + |v| = {need:.3g}; f mass may be cut", stacklevel=3)
        return self.w_max


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def hyperplane_weight(rho, s, gamma, nu, c_pos, c_neg, d):
    """B(r, theta) r^{2-d} at hyperplane distance |s| for |v'-v| = rho."""
    a = abs(s)
    if a == 0.0:
        return 0.0
    r2 = rho * rho + a * a
    log_sin = math.log(2.0 * rho * a / r2)
    radial = 0.5 * (gamma + 2.0 - d) * math.log(r2)
    if a > rho:  # cos theta > 0: grazing branch
        return c_pos * math.exp(radial - (d - 1.0 + nu) * log_sin)
    return c_neg * math.exp(radial + (1.0 + gamma + nu) * log_sin)


@numba.njit(cache=True)
def _gcd(a, b):
    while b:
        a, b = b, a % b
    return a


@numba.njit(cache=True)
def _chord(vx, vy, px, py, L, w_max, clip):
    lo = -w_max
    hi = w_max
    if not clip:
        return lo, hi
    for c, p in ((vx, px), (vy, py)):
        if abs(p) < 1e-15:
            if abs(c) > L:
                return 0.0, 0.0
            continue
        t1 = (-L - c) / p
        t2 = (L - c) / p
        if t1 > t2:
            t1, t2 = t2, t1
        lo = max(lo, t1)
        hi = min(hi, t2)
    if hi <= lo:
        return 0.0, 0.0
    return lo, hi


@numba.njit(cache=True)
def _line_sums_2d(vals, L, h, vx, vy, px, py, n_rad, w_max, clip, rhos, gamma, nu, c_pos, c_neg, power, out):
    """For each rho, (line integral of f * kernel) where kernel is B r^{2-d} (power < 0)
    or |s|^power (power >= 0). Writes into out."""
    lo, hi = _chord(vx, vy, px, py, L, w_max, clip)
    for t in range(rhos.shape[0]):
        out[t] = 0.0
    if hi <= lo:
        return
    ds = (hi - lo) / n_rad
    for k in range(n_rad):
        s = lo + (k + 0.5) * ds
        fv = interp2(vals, L, h, vx + s * px, vy + s * py)
        if fv == 0.0:
            continue
        for t in range(rhos.shape[0]):
            if power < 0.0:
                out[t] += fv * hyperplane_weight(rhos[t], s, gamma, nu, c_pos, c_neg, 2)
            else:
                out[t] += fv * abs(s) ** power
    for t in range(rhos.shape[0]):
        out[t] *= ds


@numba.njit(cache=True)
def _plane_sums_3d(vals, L, h, v, e1, e2, n_rad, w_max, rhos, gamma, nu, c_pos, c_neg, power, out):
    ds = 2.0 * w_max / n_rad
    for t in range(rhos.shape[0]):
        out[t] = 0.0
    for a in range(n_rad):
        sa = -w_max + (a + 0.5) * ds
        for b in range(n_rad):
            sb = -w_max + (b + 0.5) * ds
            x = v[0] + sa * e1[0] + sb * e2[0]
            y = v[1] + sa * e1[1] + sb * e2[1]
            z = v[2] + sa * e1[2] + sb * e2[2]
            fv = interp3(vals, L, h, x, y, z)
            if fv == 0.0:
                continue
            wn = math.sqrt(sa * sa + sb * sb)
            for t in range(rhos.shape[0]):
                if power < 0.0:
                    out[t] += fv * hyperplane_weight(rhos[t], wn, gamma, nu, c_pos, c_neg, 3)
                else:
                    out[t] += fv * wn ** power
    for t in range(rhos.shape[0]):
        out[t] *= ds * ds


@numba.njit(cache=True)
def _kf_row_2d(vals, L, h, i0, i1, n_rad, w_max, clip, gamma, nu, c_pos, c_neg, out):
    """K_f(v_i, v_j) for every node j != i; directions sharing a line share its samples."""
    N = vals.shape[0]
    vx = -L + h * i0
    vy = -L + h * i1
    rhos = np.empty(2 * N)
    sums = np.empty(2 * N)
    ts = np.empty(2 * N, dtype=np.int64)
    for a in range(0, N):
        for b in range(-(N - 1), N):
            if a == 0 and b <= 0:
                continue
            if _gcd(a, abs(b)) != 1:
                continue
            n_t = 0
            for t in range(-(N - 1), N):
                if t == 0:
                    continue
                j0 = i0 + t * a
                j1 = i1 + t * b
                if 0 <= j0 < N and 0 <= j1 < N:
                    ts[n_t] = t
                    n_t += 1
            if n_t == 0:
                continue
            norm = math.sqrt(a * a + b * b)
            for q in range(n_t):
                rhos[q] = abs(ts[q]) * norm * h
            _line_sums_2d(vals, L, h, vx, vy, -b / norm, a / norm, n_rad, w_max, clip,
                          rhos[:n_t], gamma, nu, c_pos, c_neg, -1.0, sums[:n_t])
            for q in range(n_t):
                out[i0 + ts[q] * a, i1 + ts[q] * b] = 2.0 * sums[q] / rhos[q]


def _plane_basis(z):
    z = np.asarray(z, dtype=float)
    zh = z / np.linalg.norm(z)
    trial = np.eye(3)[int(np.argmin(np.abs(zh)))]
    e1 = trial - zh * (trial @ zh)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(zh, e1)
    return e1, e2


def _hyperplane_sums(f: Distribution, v, z, rhos, params: CollisionParams, quad: HyperplaneQuad, power):
    """Integrals over the hyperplane through v orthogonal to z, one per rho."""
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    rhos = np.ascontiguousarray(rhos, dtype=float)
    out = np.empty_like(rhos)
    w_max = quad.reach(f, v)
    g = f.grid
    if g.d == 2:
        zn = z / np.linalg.norm(z)
        _line_sums_2d(f.values, g.L, g.h, v[0], v[1], -zn[1], zn[0], quad.n_radial, w_max, quad.w_max is None, rhos,
                      params.gamma, params.nu, params.c_pos, params.c_neg, power, out)
    else:
        e1, e2 = _plane_basis(z)
        _plane_sums_3d(f.values, g.L, g.h, v, e1, e2, quad.n_radial, w_max, rhos,
                       params.gamma, params.nu, params.c_pos, params.c_neg, power, out)
    return out


def _check_pair(f: Distribution, params: CollisionParams, v, v_prime):
    v = np.asarray(v, dtype=float)
    vp = np.asarray(v_prime, dtype=float)
    if params.d != f.grid.d:
        raise ValueError("parameter dimension does not match the grid")
    z = vp - v
    rho = float(np.linalg.norm(z))
    if rho == 0.0:
        raise ValueError("K_f(v, v') needs v != v'")
    return v, z, rho


def kf_hyperplane(f: Distribution, v, v_prime, params: CollisionParams, quad: HyperplaneQuad | None = None) -> float:
    """Carleman kernel K_f(v, v') by direct hyperplane quadrature."""
    quad = quad or HyperplaneQuad()
    v, z, rho = _check_pair(f, params, v, v_prime)
    s = _hyperplane_sums(f, v, z, [rho], params, quad, -1.0)[0]
    return 2.0 ** (params.d - 1) * s / rho


def kf_equivalent(f: Distribution, v, v_prime, params: CollisionParams, quad: HyperplaneQuad | None = None) -> float:
    """(int_{w . (v'-v) = 0} f(v+w) |w|^{1+gamma+nu} dw) |v'-v|^{-d-nu}."""
    quad = quad or HyperplaneQuad()
    v, z, rho = _check_pair(f, params, v, v_prime)
    s = _hyperplane_sums(f, v, z, [rho], params, quad, 1.0 + params.gamma + params.nu)[0]
    return s * rho ** (-params.d - params.nu)


def kf_row(f: Distribution, index, params: CollisionParams, quad: HyperplaneQuad | None = None) -> np.ndarray:
    """K_f(v_i, v_j) for all nodes j (NaN at j = i)."""
    quad = quad or HyperplaneQuad()
    g = f.grid
    index = tuple(int(i) for i in index)
    v = g.node(index)
    out = np.full(g.shape, np.nan)
    if g.d == 2:
        _kf_row_2d(f.values, g.L, g.h, index[0], index[1], quad.n_radial, quad.reach(f, v), quad.w_max is None,
                   params.gamma, params.nu, params.c_pos, params.c_neg, out)
        return out
    pts = g.points()
    for j in np.ndindex(*g.shape):
        if j == index:
            continue
        z = pts[j] - v
        rho = float(np.linalg.norm(z))
        out[j] = 4.0 * _hyperplane_sums(f, v, z, [rho], params, quad, -1.0)[0] / rho
    return out


# ---------------------------------------------------------------------------
# K_f integrated over v' outside the cube


@functools.lru_cache(maxsize=32)
def radial_tail_table(params: CollisionParams, lo: float = -10.0, hi: float = 10.0, n: int = 4001):
    """log T(x) on a uniform log10 grid, T(x) = int_x^inf t^{d-2} (1+t^2)^{(gamma+2-d)/2} b dt.

    b is evaluated at sin = 2t/(1+t^2) on the branch cos > 0 iff t < 1, so that
    int_{rho_e}^inf rho^{d-2} B r^{2-d} drho = |w|^{1+gamma} T(rho_e / |w|).
    """
    d, gamma, nu = params.d, params.gamma, params.nu
    e = np.linspace(lo, hi, n)
    x = 10.0 ** e
    xg, wg = np.polynomial.legendre.leggauss(8)
    a, b = x[:-1, None], x[1:, None]
    t = 0.5 * (b - a) * xg + 0.5 * (a + b)
    sin = 2.0 * t / (1.0 + t * t)
    kappa = t ** (d - 2) * (1.0 + t * t) ** (0.5 * (gamma + 2 - d)) * angular_from_sin(sin, t < 1.0, params)
    panels = (kappa * 0.5 * (b - a) * wg).sum(axis=1)
    tail = params.c_neg * 2.0 ** (1.0 + gamma + nu) * x[-1] ** (-nu) / nu
    T = tail + np.concatenate([np.cumsum(panels[::-1])[::-1], [0.0]])
    return float(lo), float(e[1] - e[0]), np.log(T), params.c_pos * 2.0 ** (-(d - 1) - nu) / nu


@numba.njit(cache=True)
def _tail_value(x, lo, step, logT, small, nu):
    """T(x) from the table, with the power-law ends beyond it."""
    if x <= 0.0:
        return np.inf
    u = (math.log10(x) - lo) / step
    n = logT.shape[0]
    if u <= 0.0:
        x0 = 10.0 ** lo
        return math.exp(logT[0]) + small * (x ** -nu - x0 ** -nu)
    if u >= n - 1:
        x1 = 10.0 ** (lo + step * (n - 1))
        return math.exp(logT[n - 1]) * (x / x1) ** -nu
    k = int(u)
    r = u - k
    return math.exp((1.0 - r) * logT[k] + r * logT[k + 1])


@numba.njit(cache=True)
def _exterior_2d(vals, L, h, vx, vy, n_dir, n_rad, lo, step, logT, small, nu, gamma, min_radius):
    total = 0.0
    dphi = 2.0 * math.pi / n_dir
    for q in range(n_dir):
        ph = (q + 0.5) * dphi
        ex = math.cos(ph)
        ey = math.sin(ph)
        # exit distance from v along e
        t_exit = np.inf
        for c, e in ((vx, ex), (vy, ey)):
            if e > 1e-300:
                t_exit = min(t_exit, (L - c) / e)
            elif e < -1e-300:
                t_exit = min(t_exit, (-L - c) / e)
        t_exit = max(t_exit, min_radius)
        s_lo, s_hi = _chord(vx, vy, -ey, ex, L, 4.0 * L, True)
        if s_hi <= s_lo:
            continue
        ds = (s_hi - s_lo) / n_rad
        acc = 0.0
        for k in range(n_rad):
            s = s_lo + (k + 0.5) * ds
            fv = interp2(vals, L, h, vx - s * ey, vy + s * ex)
            if fv == 0.0:
                continue
            a = abs(s)
            acc += fv * a ** (1.0 + gamma) * _tail_value(t_exit / a, lo, step, logT, small, nu)
        total += 2.0 * acc * ds * dphi
    return total


def kf_exterior(f: Distribution, v, params: CollisionParams, quad: HyperplaneQuad | None = None,
                n_dir: int = 256, min_radius: float = 0.0) -> float:
    """int K_f(v, v') dv' over v' outside the cube and outside the ball |v' - v| <= min_radius.

    There f(v') = 0 but the loss f(v) K_f(v, v') is not; the radial integral in
    |v' - v| is done in closed form through radial_tail_table. For v on the boundary
    the integral diverges unless min_radius > 0.
    """
    quad = quad or HyperplaneQuad()
    g = f.grid
    v = np.asarray(v, dtype=float)
    lo, step, logT, small = radial_tail_table(params)
    if g.d == 2:
        return _exterior_2d(f.values, g.L, g.h, v[0], v[1], n_dir, quad.n_radial, lo, step, logT, small,
                            params.nu, params.gamma, float(min_radius))
    nodes, wts = sphere_rule(3, n_dir)
    total = 0.0
    w_max = quad.reach(f, v)
    ds = 2.0 * w_max / quad.n_radial
    s = -w_max + (np.arange(quad.n_radial) + 0.5) * ds
    sa, sb = np.meshgrid(s, s, indexing="ij")
    wn = np.sqrt(sa * sa + sb * sb)
    for e, we in zip(nodes, wts):
        t_exit = min(((g.L if c > 0 else -g.L) - p) / c for p, c in zip(v, e) if abs(c) > 1e-300)
        t_exit = max(t_exit, min_radius)
        e1, e2 = _plane_basis(e)
        pts = v + sa[..., None] * e1 + sb[..., None] * e2
        fv = interpolate(f, pts)
        tails = np.array([_tail_value(t_exit / a, lo, step, logT, small, params.nu) if a > 0 else 0.0
                          for a in wn.ravel()]).reshape(wn.shape)
        total += we * 4.0 * float(np.sum(fv * wn ** (1.0 + params.gamma) * tails)) * ds * ds
    return total


# ---------------------------------------------------------------------------
# Carleman identity


def _graded_angles(theta_min, order=6, ratio=2.0, top=math.pi):
    """Gauss-Legendre nodes on geometric panels covering [theta_min, top]."""
    edges = [theta_min]
    while edges[-1] * ratio < top:
        edges.append(edges[-1] * ratio)
    edges.append(top)
    x, w = np.polynomial.legendre.leggauss(order)
    e = np.asarray(edges)
    a, b = e[:-1, None], e[1:, None]
    return (0.5 * (b - a) * x + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * w).ravel()


@dataclass(frozen=True)
class IdentityQuad:
    """Resolutions for the two sides of the Carleman identity (two dimensions)."""

    n_angle: int = 96          # directions of v_* - v (left) and of v' - v (right)
    n_radius: int = 96         # radial nodes for |v_* - v| and |v' - v|
    theta_min: float = 1e-3    # angular cutoff; extrapolated away
    theta_order: int = 6
    hyper: HyperplaneQuad = field(default_factory=lambda: HyperplaneQuad(n_radial=256))

    def refined(self) -> "IdentityQuad":
        return replace(
            self,
            n_angle=2 * self.n_angle,
            n_radius=2 * self.n_radius,
            theta_min=self.theta_min / 2.0,
            theta_order=self.theta_order + 2,
            hyper=replace(self.hyper, n_radial=2 * self.hyper.n_radial),
        )


def _radial_nodes(r_max, n, order=8):
    n_panels = max(1, n // order)
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, r_max, n_panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    return (0.5 * (b - a) * x + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * w).ravel()


def gaussian_test_function(v, vp):
    """H(v, v') = |v' - v|^2 exp(-|v' - v|^2): vanishes at v' = v so both sides converge."""
    dz = np.asarray(vp) - np.asarray(v)
    r2 = np.sum(dz * dz, axis=-1)
    return r2 * np.exp(-r2)


def carleman_identity_check(f: Distribution, H, params: CollisionParams, v=None, quad: IdentityQuad | None = None):
    """Both sides of int int H(v,v') f(v'_*) B dsigma dv_* = int H(v,v') K_f(v,v') dv'.

    H(v, vp) must accept broadcast arrays of shape (..., d). The left side is
    computed with an angular cutoff theta > theta_min and Richardson-extrapolated
    in theta_min. Returns (lhs, rhs, relerr).
    """
    if f.grid.d != 2:
        raise NotImplementedError("the identity check is implemented in two dimensions")
    quad = quad or IdentityQuad()
    g = f.grid
    v = np.zeros(2) if v is None else np.asarray(v, dtype=float)
    nu = params.nu

    # left side: v_* = v + R e(psi), sigma at angle theta from u_hat = (v - v_*)/|v - v_*|
    r_max = g.L * math.sqrt(2.0) + np.linalg.norm(v) + 1.0
    R, wR = _radial_nodes(r_max, quad.n_radius)
    psi = 2.0 * math.pi * (np.arange(quad.n_angle) + 0.5) / quad.n_angle
    wpsi = 2.0 * math.pi / quad.n_angle

    def left(theta_min):
        th, wth = _graded_angles(theta_min, order=quad.theta_order)
        th = np.concatenate([th, -th])
        wth = np.concatenate([wth, wth])
        b = angular_from_sin(np.sin(th), np.cos(th) > 0.0, params)
        total = 0.0
        for p in psi:
            e = np.array([math.cos(p), math.sin(p)])
            uh = -e
            up = np.array([-uh[1], uh[0]])
            sig = np.cos(th)[:, None] * uh + np.sin(th)[:, None] * up     # (T, 2)
            vstar = v + R[:, None] * e                                      # (R, 2)
            center = 0.5 * (v + vstar)
            vp = center[:, None, :] + 0.5 * R[:, None, None] * sig[None]   # (R, T, 2)
            vps = center[:, None, :] - 0.5 * R[:, None, None] * sig[None]
            integrand = H(v, vp) * interpolate(f, vps) * b[None, :] * (R ** params.gamma)[:, None]
            total += float(np.einsum("rt,r,t->", integrand, wR * R, wth)) * wpsi
        return total

    i1, i2 = left(quad.theta_min), left(0.5 * quad.theta_min)
    # leading cutoff error of a smooth H with H(v,v)=0 is O(theta_min^{2-nu})
    lhs = i2 + (i2 - i1) / (2.0 ** (2.0 - nu) - 1.0)

    # right side: v' = v + rho e(phi); lines through v orthogonal to e(phi)
    rho, wrho = _radial_nodes(6.5, quad.n_radius)
    n_phi = quad.n_angle
    phi = math.pi * (np.arange(n_phi) + 0.5) / n_phi      # lines for phi and phi + pi coincide
    rhs = 0.0
    for p in phi:
        e = np.array([math.cos(p), math.sin(p)])
        sums = _hyperplane_sums(f, v, e, rho, params, quad.hyper, -1.0)
        K = 2.0 * sums / rho
        for sign in (1.0, -1.0):
            vp = v + sign * rho[:, None] * e
            rhs += float(np.sum(H(v, vp) * K * rho * wrho)) * (math.pi / n_phi)
    if lhs == 0.0 and rhs == 0.0:
        return 0.0, 0.0, 0.0
    relerr = abs(lhs - rhs) / max(abs(lhs), abs(rhs))
    return lhs, rhs, relerr


# ---------------------------------------------------------------------------
# change of variables: int_{S^{d-1}} int_{w . sigma = 0} g(w) dw dsigma = c_d int g(y)/|y| dy


def _panel_rule(breaks, order=16):
    x, w = np.polynomial.legendre.leggauss(order)
    e = np.asarray(breaks, dtype=float)
    a, b = e[:-1, None], e[1:, None]
    return (0.5 * (b - a) * x + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * w).ravel()


DEFAULT_BREAKS = tuple([0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0])


def sphere_rule(d: int, n: int):
    """Quadrature on S^{d-1} as (nodes, weights) for integrating smooth functions."""
    if d == 2:
        t = 2.0 * math.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(t), np.sin(t)], axis=1), np.full(n, 2.0 * math.pi / n)
    m = max(2, n // 2)
    x, w = np.polynomial.legendre.leggauss(m)
    ph = 2.0 * math.pi * (np.arange(2 * m) + 0.5) / (2 * m)
    ct, pp = np.meshgrid(x, ph, indexing="ij")
    st = np.sqrt(1.0 - ct * ct)
    nodes = np.stack([st * np.cos(pp), st * np.sin(pp), ct], axis=-1).reshape(-1, 3)
    weights = (w[:, None] * np.full(2 * m, 2.0 * math.pi / (2 * m))[None, :]).ravel()
    return nodes, weights


def change_of_vars_check(g, d: int, n_sphere: int = 64, breaks=DEFAULT_BREAKS, order: int = 16):
    """(lhs, rhs_integral, c_d) for a nonnegative g(y) with y of shape (..., d).

    Both sides use Gauss-Legendre panels in the radial variable with the given
    breakpoints; g must vanish beyond the last breakpoint.
    """
    r, wr = _panel_rule(breaks, order)
    sig, wsig = sphere_rule(d, n_sphere)
    if d == 2:
        # hyperplane orthogonal to sigma through 0 is the line t sigma_perp, t in R
        perp = np.stack([-sig[:, 1], sig[:, 0]], axis=1)
        pts = np.concatenate([r[:, None, None] * perp[None], -r[:, None, None] * perp[None]], axis=0)
        line = (g(pts) * np.concatenate([wr, wr])[:, None]).sum(axis=0)
        lhs = float(line @ wsig)
        # int g/|y| dy = int_{S^1} int_0^inf g(r e) dr de
        rhs = float(((g(r[:, None, None] * sig[None]) * wr[:, None]).sum(axis=0)) @ wsig)
    elif d == 3:
        circ, wcirc = sphere_rule(2, n_sphere)
        lhs = 0.0
        for s, ws in zip(sig, wsig):
            e1, e2 = _plane_basis(s)
            dirs = circ[:, :1] * e1 + circ[:, 1:] * e2                  # unit vectors in the plane
            vals = g(r[:, None, None] * dirs[None])                     # (R, C)
            lhs += ws * float(np.einsum("rc,r,c->", vals, wr * r, wcirc))
        rhs = float(np.einsum("rs,r,s->", g(r[:, None, None] * sig[None]), wr * r, wsig))
    else:
        raise ValueError("d must be 2 or 3")
    if rhs == 0.0:
        return lhs, rhs, float("nan")
    return lhs, rhs, lhs / rhs


def change_of_vars_constant(d: int) -> float:
    """Closed-form c_d = |S^{d-2}| (2 in the plane, 2 pi in space)."""
    return 2.0 * math.pi ** ((d - 1) / 2.0) / math.gamma((d - 1) / 2.0)


# ---------------------------------------------------------------------------
# cone set A(v) and the bounds built on it


def symmetric_sphere_nodes(d: int, n: int):
    """n nodes on S^{d-1}, closed under sigma -> -sigma, with equal weights."""
    if n % 2:
        raise ValueError("sphere node count must be even")
    if d == 2:
        t = 2.0 * math.pi * np.arange(n) / n
        return np.stack([np.cos(t), np.sin(t)], axis=1), np.full(n, 2.0 * math.pi / n)
    half = n // 2
    k = np.arange(half) + 0.5
    z = k / half                                   # upper hemisphere, z in (0, 1)
    phi = math.pi * (1.0 + math.sqrt(5.0)) * k
    rr = np.sqrt(1.0 - z * z)
    upper = np.stack([rr * np.cos(phi), rr * np.sin(phi), z], axis=1)
    return np.concatenate([upper, -upper]), np.full(n, 4.0 * math.pi / n)


@dataclass(frozen=True, eq=False)
class ConeSet:
    v: np.ndarray
    directions: np.ndarray      # sigma in A(v)
    delta: float
    measure: float
    nodes: np.ndarray = None    # all sphere nodes
    node_weight: float = 0.0
    member: np.ndarray = None   # boolean per node
    sections: np.ndarray = None  # hyperplane-section measure per node

    def contains(self, vecs) -> np.ndarray:
        """Whether the directions of the given vectors (relative to v) fall in A(v)."""
        z = np.asarray(vecs, dtype=float) - self.v
        n = np.linalg.norm(z, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = z / n[..., None]
        idx = np.argmax(u @ self.nodes.T, axis=-1)
        return np.where(n > 0.0, self.member[idx], False)


def _in_levelset(f: Distribution, ls: LevelSet, pts):
    inside = np.sum(pts * pts, axis=-1) <= ls.r * ls.r
    return inside & (interpolate(f, pts) > ls.l)


def cone_set(f: Distribution, v, levelset: LevelSet, delta: float | None = None, sphere_nodes: int = 256,
             step: float | None = None) -> ConeSet:
    """A(v) = {sigma : |{w . sigma = 0} intersect (S - v)| > delta} on symmetric sphere nodes."""
    g = f.grid
    d = g.d
    v = np.asarray(v, dtype=float)
    delta = levelset.m / (8.0 * change_of_vars_constant(d)) if delta is None else delta
    nodes, wts = symmetric_sphere_nodes(d, sphere_nodes)
    step = g.h / 8.0 if step is None else step
    half = sphere_nodes // 2
    sections = np.zeros(sphere_nodes)
    r = levelset.r
    for k in range(half):
        s = nodes[k]
        dist = abs(float(s @ v))
        if dist >= r:
            continue
        reach = math.sqrt(r * r - dist * dist)
        foot = v - float(s @ v) * s          # closest point to 0 on the hyperplane, relative origin
        t = np.arange(-reach, reach, step) + 0.5 * step
        if d == 2:
            perp = np.array([-s[1], s[0]])
            pts = foot + t[:, None] * perp
            meas = float(_in_levelset(f, levelset, pts).sum()) * step
        else:
            e1, e2 = _plane_basis(s)
            aa, bb = np.meshgrid(t, t, indexing="ij")
            pts = foot + aa[..., None] * e1 + bb[..., None] * e2
            meas = float(_in_levelset(f, levelset, pts).sum()) * step * step
        sections[k] = sections[k + half] = meas
    member = sections > delta
    cone = ConeSet(
        v=v,
        directions=nodes[member],
        delta=delta,
        measure=float(wts[member].sum()),
        nodes=nodes,
        node_weight=float(wts[0]),
        member=member,
        sections=sections,
    )
    if not member.any():
        logger.warning("A(v) is empty at v=%s (max section %.3g, delta %.3g)", v.tolist(), sections.max(), delta)
    return cone


@dataclass
class KernelBoundReport:
    lam: float
    lam_max: float
    samples: int
    radii: np.ndarray
    ok: bool


def cone_kf_lower_bound_check(f: Distribution, v, cone: ConeSet, params: CollisionParams,
                              quad: HyperplaneQuad | None = None, n_samples: int = 64,
                              radii=None) -> KernelBoundReport:
    """min over sampled v' = v + rho sigma, sigma in A(v), of K_f |v'-v|^{d+nu} / <v>^{1+gamma+nu}."""
    if len(cone.directions) == 0:
        raise ValueError("empty cone: A(v) has no directions")
    quad = quad or HyperplaneQuad()
    v = np.asarray(v, dtype=float)
    g = f.grid
    radii = np.geomspace(g.h, 2.0 * g.L, 12) if radii is None else np.asarray(radii, dtype=float)
    dirs = cone.directions
    # directions come in +/- pairs with identical hyperplanes; keep one of each
    keep = []
    for k, s in enumerate(dirs):
        if not any(np.allclose(-s, dirs[j]) for j in keep):
            keep.append(k)
    dirs = dirs[keep]
    stride = max(1, len(dirs) // max(1, n_samples // len(radii)))
    dirs = dirs[::stride]
    scale = bracket(v) ** (1.0 + params.gamma + params.nu)
    vals = []
    for s in dirs:
        sums = _hyperplane_sums(f, v, s, radii, params, quad, -1.0)
        K = 2.0 ** (params.d - 1) * sums / radii
        vals.append(K * radii ** (params.d + params.nu) / scale)
    vals = np.asarray(vals)
    lam = float(vals.min())
    return KernelBoundReport(lam=lam, lam_max=float(vals.max()), samples=vals.size, radii=radii, ok=lam > 0.0)


@dataclass
class ConeIntegralReport:
    lhs: float
    base: float            # m^{1+nu/d} |A|^{1+nu/d} / (int_C |g|)^{nu/d}
    ratio: float           # lhs / base, the measured constant c
    proof_constant: float  # (2d)^{-nu/d} / (2 nu)
    mass_in_cone: float
    radius: float          # (2d / (|A| m) int_C |g|)^{1/d}
    worst_case_numeric: float
    worst_case_closed: float

    @property
    def holds(self) -> bool:
        return self.lhs >= self.worst_case_closed * (1.0 - 1e-6) and self.ratio >= self.proof_constant * (1.0 - 1e-6)


def _radial_panels(r0, r1, ratio=1.01, order=4, breaks=()):
    edges = [r0]
    while edges[-1] * ratio < r1:
        edges.append(edges[-1] * ratio)
    edges.append(r1)
    e = np.unique(np.concatenate([edges, [b for b in breaks if r0 < b < r1]]))
    return _panel_rule(e, order)


def cone_integral_lower_bound_check(g, v_tilde, m_tilde: float, cone: ConeSet, nu: float,
                                    exclusion: float | None = None, outer_radius: float | None = None,
                                    breaks=()) -> ConeIntegralReport:
    """Lower bound for int_C (m - g(v')) |v_tilde - v'|^{-d-nu} dv' over the cone at v_tilde.

    g is a Distribution (interpolated, zero outside the cube) or a callable on
    arrays of shape (..., d) that vanishes beyond outer_radius from v_tilde.
    The apex ball of radius `exclusion` (default one grid cell, or 1e-3 for callables)
    is left out.
    """
    vt = np.asarray(v_tilde, dtype=float)
    d = vt.shape[0]
    if isinstance(g, Distribution):
        gfun = lambda x: interpolate(g, x)  # noqa: E731
        exclusion = g.grid.h if exclusion is None else exclusion
        outer_radius = 2.0 * math.sqrt(d) * g.grid.L + np.linalg.norm(vt) if outer_radius is None else outer_radius
    else:
        gfun = g
        exclusion = 1e-3 if exclusion is None else exclusion
        if outer_radius is None:
            raise ValueError("outer_radius is required when g is a callable")
    rho, wrho = _radial_panels(exclusion, outer_radius, breaks=breaks)
    dirs = cone.directions
    A = cone.measure
    w_dir = cone.node_weight
    pts = vt + rho[None, :, None] * dirs[:, None, :]
    gv = gfun(pts)
    lhs = float(((m_tilde - gv) * rho ** (-1.0 - nu) * wrho).sum()) * w_dir
    lhs += m_tilde * A * outer_radius ** (-nu) / nu
    mass = float((np.abs(gv) * rho ** (d - 1) * wrho).sum()) * w_dir
    if mass == 0.0:
        raise ValueError("g has no mass in the cone, so the integral diverges at the apex")
    base = m_tilde ** (1 + nu / d) * A ** (1 + nu / d) / mass ** (nu / d)
    radius = (2.0 * d * mass / (A * m_tilde)) ** (1.0 / d)
    tail, wt = _radial_panels(radius, outer_radius)
    worst_numeric = 0.5 * m_tilde * A * (float((tail ** (-1.0 - nu) * wt).sum()) + outer_radius ** (-nu) / nu)
    worst_closed = 0.5 * m_tilde * A * radius ** (-nu) / nu
    return ConeIntegralReport(
        lhs=lhs,
        base=base,
        ratio=lhs / base,
        proof_constant=(2.0 * d) ** (-nu / d) / (2.0 * nu),
        mass_in_cone=mass,
        radius=radius,
        worst_case_numeric=worst_numeric,
        worst_case_closed=worst_closed,
    )
