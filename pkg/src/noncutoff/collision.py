"""The collision operator Q(f, f) on a velocity grid.

Pointwise evaluation follows the weighted splitting

    Q = Q11 + Q12 + Q2,
    Q11(v) = (1/w(v)) int (f'w' - f w) K_f(v, v') dv',
    Q12(v) = int f'w' (1/w' - 1/w) K_f(v, v') dv',
    Q2(v)  = f(v) int int (f'_* - f_*) B dsigma dv_*,

where K_f is the Carleman kernel. Q11 + Q12 does not depend on the weight; the
split only matters for the sign structure at the maximiser of f w.

Time stepping uses GridCollisionOperator instead: a weak-form discretisation
whose post-collision velocities are deposited with quadratic B-splines, so that
mass, momentum and energy are conserved to rounding.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .carleman import HyperplaneQuad, cone_kf_lower_bound_check, cone_set, kf_exterior, kf_row
from .grid import Distribution, Grid, StatsBounds, interp2, interp3, interpolate, level_set_constants, maxwellian, weighted_l1, weighted_sup
from .kernel import CollisionParams, angular_from_sin
from .weights import CONSTANT, Weight, bracket, log_weight_eval, p2_constant

logger = logging.getLogger(__name__)

DIRECT = "direct"
CONVOLUTION = "convolution"


@dataclass(frozen=True)
class SplitConfig:
    weight: Weight = field(default_factory=lambda: Weight(CONSTANT))
    exclusion_radius: float | None = None   # None means one grid step
    unit_ball_radius: float = 1.0
    q2_mode: str = DIRECT
    conv_constant: float | None = None      # None means calibrate on first use

    def __post_init__(self):
        if self.q2_mode not in (DIRECT, CONVOLUTION):
            raise ValueError(f"q2_mode must be '{DIRECT}' or '{CONVOLUTION}'")
        if self.unit_ball_radius <= 0.0:
            raise ValueError("unit_ball_radius must be positive")

    def exclusion(self, grid: Grid) -> float:
        r = grid.h if self.exclusion_radius is None else self.exclusion_radius
        if not 0.5 * grid.h - 1e-12 <= r <= 4.0 * grid.h + 1e-12:
            raise ValueError(f"exclusion radius {r} outside [h/2, 4h] with h={grid.h:.4g}")
        return r


@dataclass(frozen=True)
class CollisionQuads:
    """Quadrature resolutions for pointwise evaluation."""

    hyper: HyperplaneQuad | None = None     # None: n_radial = max(256, 8 N)
    theta_min: float = 1e-3
    theta_order: int = 6
    theta_ratio: float = 2.0
    n_azimuth: int = 16                     # three dimensions only

    def hyperplane(self, grid: Grid) -> HyperplaneQuad:
        return self.hyper or HyperplaneQuad(n_radial=max(256, 8 * grid.N))


@dataclass(frozen=True)
class NodeTerms:
    q11: float
    q12_inside: float
    q12_outside: float
    q2: float

    @property
    def q12(self) -> float:
        return self.q12_inside + self.q12_outside

    @property
    def total(self) -> float:
        return self.q11 + self.q12 + self.q2


# ---------------------------------------------------------------------------
# Q2: direct angular quadrature and the convolution form


def _angle_rule(theta_min, order, ratio):
    """Gauss nodes on geometric panels over [theta_min, pi] with a break at pi/2.

    Also returns the extra panel [theta_min/2, theta_min] used for extrapolation.
    """
    edges = [theta_min]
    while edges[-1] * ratio < 0.5 * math.pi:
        edges.append(edges[-1] * ratio)
    edges += [0.5 * math.pi, math.pi]
    x, w = np.polynomial.legendre.leggauss(order)
    e = np.asarray(edges)
    a, b = e[:-1, None], e[1:, None]
    main = ((0.5 * (b - a) * x + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * w).ravel())
    extra = (0.5 * theta_min + 0.5 * theta_min * 0.5 * (x + 1.0), 0.25 * theta_min * w)
    return main, extra


@numba.njit(cache=True)
def _q2_sums_2d(vals, L, h, tw, vx, vy, th, wb, level, gamma):
    """sum_j tw_j |u|^gamma int (f(v'_*) - f_j) b dtheta, split by angular level."""
    N = vals.shape[0]
    s0 = 0.0
    s1 = 0.0
    cs = np.cos(th)
    sn = np.sin(th)
    for a in range(N):
        for b in range(N):
            fj = vals[a, b]
            wx = -L + h * a
            wy = -L + h * b
            ux = vx - wx
            uy = vy - wy
            un = math.sqrt(ux * ux + uy * uy)
            if un == 0.0:
                continue
            ex = ux / un
            ey = uy / un
            cx = 0.5 * (vx + wx)
            cy = 0.5 * (vy + wy)
            acc0 = 0.0
            acc1 = 0.0
            for k in range(th.shape[0]):
                c = cs[k]
                s = sn[k]
                tot = 0.0
                for sg in (1.0, -1.0):
                    sx = c * ex - sg * s * ey
                    sy = sg * s * ex + c * ey
                    fp = interp2(vals, L, h, cx - 0.5 * un * sx, cy - 0.5 * un * sy)
                    tot += fp - fj
                if level[k] == 0:
                    acc0 += wb[k] * tot
                else:
                    acc1 += wb[k] * tot
            scale = tw[a, b] * un ** gamma
            s0 += scale * acc0
            s1 += scale * acc1
    return s0, s1


@numba.njit(cache=True)
def _q2_sums_3d(vals, L, h, tw, v, th, wb, level, n_az, gamma):
    N = vals.shape[0]
    s0 = 0.0
    s1 = 0.0
    cs = np.cos(th)
    sn = np.sin(th)
    dphi = 2.0 * math.pi / n_az
    for a in range(N):
        for b in range(N):
            for c3 in range(N):
                fj = vals[a, b, c3]
                if tw[a, b, c3] == 0.0:
                    continue
                w = np.array([-L + h * a, -L + h * b, -L + h * c3])
                u = v - w
                un = math.sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
                if un == 0.0:
                    continue
                e = u / un
                # orthonormal frame around e
                if abs(e[0]) < 0.9:
                    t = np.array([1.0, 0.0, 0.0])
                else:
                    t = np.array([0.0, 1.0, 0.0])
                p1 = t - e * (t[0] * e[0] + t[1] * e[1] + t[2] * e[2])
                p1 /= math.sqrt(p1[0] ** 2 + p1[1] ** 2 + p1[2] ** 2)
                p2 = np.array([e[1] * p1[2] - e[2] * p1[1], e[2] * p1[0] - e[0] * p1[2], e[0] * p1[1] - e[1] * p1[0]])
                cen = 0.5 * (v + w)
                acc0 = 0.0
                acc1 = 0.0
                for k in range(th.shape[0]):
                    tot = 0.0
                    for q in range(n_az):
                        ph = (q + 0.5) * dphi
                        sg = cs[k] * e + sn[k] * (math.cos(ph) * p1 + math.sin(ph) * p2)
                        x = cen - 0.5 * un * sg
                        tot += interp3(vals, L, h, x[0], x[1], x[2]) - fj
                    tot *= dphi * sn[k]
                    if level[k] == 0:
                        acc0 += wb[k] * tot
                    else:
                        acc1 += wb[k] * tot
                scale = tw[a, b, c3] * un ** gamma
                s0 += scale * acc0
                s1 += scale * acc1
    return s0, s1


@numba.njit(cache=True)
def _far_angular(theta, d, gamma, nu, c_pos, c_neg, xg, wg):
    """int_theta^pi sin^{d-2}(t) b(cos t) cos^{-d-gamma}(t/2) dt."""
    total = 0.0
    top = 0.5 * math.pi
    a = theta
    while a < top:
        b = min(2.0 * a, top)
        for k in range(xg.shape[0]):
            t = 0.5 * (b - a) * xg[k] + 0.5 * (a + b)
            s = math.sin(t)
            total += 0.5 * (b - a) * wg[k] * s ** (d - 2) * c_pos * s ** (-(d - 1) - nu) * math.cos(0.5 * t) ** (-d - gamma)
        a = b
    # [max(theta, pi/2), pi): panels graded toward pi, analytic remainder below 1e-12
    gap = math.pi - max(theta, top)
    while gap > 1e-12:
        lo = math.pi - gap
        hi = math.pi - 0.5 * gap
        for k in range(xg.shape[0]):
            t = 0.5 * (hi - lo) * xg[k] + 0.5 * (lo + hi)
            s = math.sin(t)
            total += 0.5 * (hi - lo) * wg[k] * s ** (d - 2) * c_neg * s ** (1.0 + gamma + nu) * math.cos(0.5 * t) ** (-d - gamma)
        gap *= 0.5
    total += c_neg * 2.0 ** (d + gamma) * gap ** nu / nu
    return total


@numba.njit(cache=True)
def _exit_distance(p, direction, L):
    t = np.inf
    for k in range(p.shape[0]):
        if direction[k] > 1e-300:
            t = min(t, (L - p[k]) / direction[k])
        elif direction[k] < -1e-300:
            t = min(t, (-L - p[k]) / direction[k])
    return max(t, 0.0)


@numba.njit(cache=True)
def _far_gain(vals, L, h, tw, v, gamma, nu, c_pos, c_neg, n_az, theta_min, xg, wg):
    """Gain from pre-collision partners v_* outside the cube.

    With the post-collision point x = v'_* fixed, v_* runs over the hyperplane
    through x orthogonal to v - x, at distance |v - x| tan(theta/2) from x; the
    part of that hyperplane outside the cube corresponds to theta above the exit angle.
    The exit angle is floored at theta_min, the cutoff of the inner sum.
    """
    d = v.shape[0]
    flat = vals.ravel()
    twf = tw.ravel()
    N = vals.shape[0]
    total = 0.0
    x = np.empty(d)
    y = np.empty(d)
    dirn = np.empty(d)
    for q in range(flat.shape[0]):
        fx = flat[q]
        if fx == 0.0 or twf[q] == 0.0:
            continue
        r = q
        for k in range(d - 1, -1, -1):
            x[k] = -L + h * (r % N)
            r //= N
        rho = 0.0
        for k in range(d):
            y[k] = v[k] - x[k]
            rho += y[k] * y[k]
        rho = math.sqrt(rho)
        if rho == 0.0:
            continue
        acc = 0.0
        if d == 2:
            for sg in (1.0, -1.0):
                dirn[0] = -sg * y[1] / rho
                dirn[1] = sg * y[0] / rho
                t = _exit_distance(x, dirn, L)
                acc += _far_angular(max(2.0 * math.atan(t / rho), theta_min), 2, gamma, nu, c_pos, c_neg, xg, wg)
        else:
            e = y / rho
            if abs(e[0]) < 0.9:
                p1 = np.array([0.0, -e[2], e[1]])
            else:
                p1 = np.array([e[2], 0.0, -e[0]])
            p1 /= math.sqrt(p1[0] ** 2 + p1[1] ** 2 + p1[2] ** 2)
            p2 = np.array([e[1] * p1[2] - e[2] * p1[1], e[2] * p1[0] - e[0] * p1[2], e[0] * p1[1] - e[1] * p1[0]])
            dphi = 2.0 * math.pi / n_az
            for j in range(n_az):
                ph = (j + 0.5) * dphi
                for k in range(3):
                    dirn[k] = math.cos(ph) * p1[k] + math.sin(ph) * p2[k]
                t = _exit_distance(x, dirn, L)
                acc += dphi * _far_angular(max(2.0 * math.atan(t / rho), theta_min), 3, gamma, nu, c_pos, c_neg, xg, wg)
        total += twf[q] * fx * rho ** gamma * acc
    return total


def q2_direct_integral(f: Distribution, v, params: CollisionParams, quads: CollisionQuads | None = None) -> float:
    """int int (f'_* - f_*) B dsigma dv_*, with angular cutoff extrapolated to zero.

    Pairing theta with -theta (or averaging over the azimuth) cancels the first-order
    term, so the cutoff error behaves like theta_min^{2-nu}; one Richardson step
    with theta_min and theta_min/2 removes it. Partners v_* outside the cube have
    f_* = 0 but still feed f'_* inside it; that gain is added in closed angular form.
    """
    quads = quads or CollisionQuads()
    g = f.grid
    v = np.asarray(v, dtype=float)
    (th, wt), (th_x, wt_x) = _angle_rule(quads.theta_min, quads.theta_order, quads.theta_ratio)
    th_all = np.concatenate([th, th_x])
    w_all = np.concatenate([wt, wt_x])
    b = angular_from_sin(np.sin(th_all), np.cos(th_all) > 0.0, params)
    level = np.concatenate([np.zeros(th.size, np.int64), np.ones(th_x.size, np.int64)])
    tw = g.trapezoid_weights()
    if g.d == 2:
        s0, s1 = _q2_sums_2d(f.values, g.L, g.h, tw, v[0], v[1], th_all, w_all * b, level, params.gamma)
    else:
        s0, s1 = _q2_sums_3d(f.values, g.L, g.h, tw, v, th_all, w_all * b, level, quads.n_azimuth, params.gamma)
    i1 = s0
    i2 = s0 + s1
    inner = i2 + (i2 - i1) / (2.0 ** (2.0 - params.nu) - 1.0)
    xg, wg = np.polynomial.legendre.leggauss(8)
    far = _far_gain(f.values, g.L, g.h, tw, v, params.gamma, params.nu, params.c_pos, params.c_neg,
                    quads.n_azimuth, quads.theta_min, xg, wg)
    return inner + far


def convolution_integral(f: Distribution, v, params: CollisionParams) -> float:
    """sum_j tw_j |v - v_j|^gamma f_j."""
    g = f.grid
    diff = g.points() - np.asarray(v, dtype=float)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return float(np.sum(g.trapezoid_weights() * dist ** params.gamma * f.values))


@functools.lru_cache(maxsize=16)
def calibrate_convolution_constant(params: CollisionParams, quads: CollisionQuads | None = None) -> float:
    """C_b such that C_b (|.|^gamma * f)(v) matches the direct angular integral.

    Calibrated once on the standard Maxwellian at v = (1, 0, ...).
    """
    grid = Grid(2, 48, 8.0) if params.d == 2 else Grid(3, 24, 6.0)
    m = maxwellian(grid)
    v = np.zeros(params.d)
    v[0] = 1.0
    return q2_direct_integral(m, v, params, quads) / convolution_integral(m, v, params)


def _q2_value(f: Distribution, v, cfg: SplitConfig, params: CollisionParams, quads: CollisionQuads, fv: float) -> float:
    if fv == 0.0:
        return 0.0
    if cfg.q2_mode == DIRECT:
        return fv * q2_direct_integral(f, v, params, quads)
    cb = cfg.conv_constant if cfg.conv_constant is not None else calibrate_convolution_constant(params)
    return fv * cb * convolution_integral(f, v, params)


# ---------------------------------------------------------------------------
# pointwise splitting


def _check_params(f: Distribution, params: CollisionParams):
    if params.d != f.grid.d:
        raise ValueError("parameter dimension does not match the grid")


def _node_index(grid: Grid, v):
    return grid.index_of(v)


def node_terms(f: Distribution, v, cfg: SplitConfig, params: CollisionParams,
               quads: CollisionQuads | None = None, row: np.ndarray | None = None) -> NodeTerms:
    """All three pieces of the splitting at a grid node v, sharing one K_f row."""
    _check_params(f, params)
    quads = quads or CollisionQuads()
    g = f.grid
    idx = _node_index(g, v)
    v = g.node(idx)
    K = kf_row(f, idx, params, quads.hyperplane(g)) if row is None else row
    pts = g.points()
    dz = np.sqrt(np.sum((pts - v) ** 2, axis=-1))
    r_ex = cfg.exclusion(g)
    keep = dz > r_ex * (1.0 + 1e-9)
    tw = g.trapezoid_weights()
    lw = log_weight_eval(cfg.weight, pts)
    lw0 = lw[idx]
    fi = f.values[idx]
    ratio = np.exp(lw - lw0)                     # w' / w
    Kk = np.where(keep, K, 0.0)
    q11 = float(np.sum(tw * (f.values * ratio - fi) * Kk))
    if fi > 0.0:
        q11 -= fi * kf_exterior(f, v, params, quads.hyperplane(g), min_radius=r_ex)
    piece = tw * f.values * (1.0 - ratio) * Kk   # f'w'(1/w' - 1/w) K
    inside = dz <= cfg.unit_ball_radius
    q12_in = float(np.sum(piece[inside]))
    q12_out = float(np.sum(piece[~inside]))
    q2 = _q2_value(f, v, cfg, params, quads, float(fi))
    return NodeTerms(q11=q11, q12_inside=q12_in, q12_outside=q12_out, q2=q2)


def q11(f: Distribution, v, cfg: SplitConfig, params: CollisionParams, quads: CollisionQuads | None = None) -> float:
    return _q1_terms(f, v, cfg, params, quads)[0]


def q12(f: Distribution, v, cfg: SplitConfig, params: CollisionParams, quads: CollisionQuads | None = None) -> float:
    t = _q1_terms(f, v, cfg, params, quads)
    return t[1] + t[2]


def _q1_terms(f, v, cfg, params, quads):
    # node_terms without the Q2 piece
    t = node_terms(f, v, SplitConfig(cfg.weight, cfg.exclusion_radius, cfg.unit_ball_radius, CONVOLUTION, 0.0),
                   params, quads)
    return t.q11, t.q12_inside, t.q12_outside


def q2(f: Distribution, v, cfg: SplitConfig, params: CollisionParams, quads: CollisionQuads | None = None) -> float:
    """Q2 at any point v (f(v) is interpolated off the grid)."""
    _check_params(f, params)
    quads = quads or CollisionQuads()
    v = np.asarray(v, dtype=float)
    fv = float(interpolate(f, v[None])[0])
    return _q2_value(f, v, cfg, params, quads, fv)


def q_total(f: Distribution, v, cfg: SplitConfig, params: CollisionParams, quads: CollisionQuads | None = None) -> float:
    return node_terms(f, v, cfg, params, quads).total


def q_field(f: Distribution, mask, cfg: SplitConfig, params: CollisionParams,
            quads: CollisionQuads | None = None) -> Distribution:
    """q_total on the nodes selected by mask, as a grid array (NaN elsewhere).

    Returns the raw array; wrap the nonnegative part or dump it with save_distribution
    after replacing NaN if a Distribution is needed.
    """
    g = f.grid
    out = np.full(g.shape, np.nan)
    for idx in zip(*np.nonzero(mask)):
        out[idx] = node_terms(f, g.node(idx), cfg, params, quads).total
    return out


# ---------------------------------------------------------------------------
# upper bound for Q11 at the maximiser of f w


@dataclass
class Q11BoundReport:
    v0: np.ndarray
    case: int
    R: float
    q11: float
    cone_restricted: float     # q11 with v' restricted to the cone
    kernel_bound: float        # after K_f >= lam <v0>^{1+gamma+nu} |z|^{-d-nu}
    integral_bound: float         # after the cone-integral lower bound
    case_bound: float          # after replacing int_C f w by the case-specific norm
    lam: float
    cone_constant: float
    cone_measure: float
    checks: dict

    @property
    def holds(self) -> bool:
        order = self.q11 <= self.cone_restricted <= self.kernel_bound <= self.integral_bound <= self.case_bound < 0.0
        return bool(order and all(self.checks.values()))

    def summary(self) -> str:
        lines = [
            f"v0 = {np.round(self.v0, 6).tolist()}  case {self.case}  (R = {self.R:.6g})",
            f"q11 = {self.q11:.6e}",
            f"restricted to cone = {self.cone_restricted:.6e}",
            f"kernel lower bound = {self.kernel_bound:.6e}",
            f"cone-integral bound = {self.integral_bound:.6e}",
            f"case bound = {self.case_bound:.6e}",
            f"lambda = {self.lam:.6e}  c = {self.cone_constant:.6e}  |A| = {self.cone_measure:.6e}",
        ]
        lines += [f"{name}: {'ok' if ok else 'FAILED'}" for name, ok in self.checks.items()]
        lines.append("holds" if self.holds else "does not hold")
        return "\n".join(lines)


def q11_upper_bound_check(f: Distribution, cfg: SplitConfig, params: CollisionParams, bounds: StatsBounds,
                          alphas: tuple, R: float | None = None, quads: CollisionQuads | None = None,
                          sphere_nodes: int = 256) -> Q11BoundReport:
    """Walk the chain of upper bounds for Q11 at the node v0 maximising f w(.; alpha2).

    alphas = (alpha1, alpha2, alpha3) from alpha_cascade; cfg.weight must carry alpha2.
    R defaults to 4 r, with r the level-set radius. Every link is evaluated with
    lattice sums over the grid, so each inequality is checked on the same data.
    """
    _check_params(f, params)
    quads = quads or CollisionQuads()
    a1, a2, a3 = alphas
    w2 = cfg.weight
    if w2.family == CONSTANT or abs(w2.alpha - a2) > 1e-12 * a2:
        raise ValueError("cfg.weight must be the alpha2 weight of the cascade")
    g = f.grid
    d, nu = g.d, params.nu
    _, v0 = weighted_sup(f, w2)
    idx = g.index_of(v0)
    ls = level_set_constants(f, bounds)
    R = 4.0 * ls.r if R is None else float(R)
    case = 1 if np.linalg.norm(v0) <= R else 2

    hq = quads.hyperplane(g)
    K = kf_row(f, idx, params, hq)
    terms = node_terms(f, v0, cfg, params, quads, row=K)

    pts = g.points()
    z = pts - v0
    dz = np.sqrt(np.sum(z * z, axis=-1))
    keep = dz > cfg.exclusion(g) * (1.0 + 1e-9)
    cone = cone_set(f, v0, ls, sphere_nodes=sphere_nodes)
    in_cone = cone.contains(pts) & keep
    tw = g.trapezoid_weights()
    lw = log_weight_eval(w2, pts)
    gw = f.values * np.exp(lw - lw[idx])        # f w / w(v0)
    m_over_w = f.values[idx]                    # m / w(v0)
    restricted = float(np.sum((tw * (gw - m_over_w) * K)[in_cone]))

    scale = bracket(v0) ** (1.0 + params.gamma + nu)
    lam_sampled = cone_kf_lower_bound_check(f, v0, cone, params, hq).lam
    with np.errstate(divide="ignore"):
        lam_lattice = float(np.min((K * dz ** (d + nu))[in_cone])) / scale
    lam = min(lam_sampled, lam_lattice)
    # everything below is divided by w(v0): m -> f(v0), f'w' -> f' w'/w(v0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cone_sum = float(np.sum((tw * (m_over_w - gw) * dz ** (-d - nu))[in_cone]))
    kernel_bound = -lam * scale * cone_sum

    mass_cone = float(np.sum((tw * gw)[in_cone]))
    A = cone.measure
    c = (2.0 * d) ** (-nu / d) / (2.0 * nu)
    cone_integral = c * m_over_w ** (1 + nu / d) * A ** (1 + nu / d) / mass_cone ** (nu / d)
    integral_bound = -lam * scale * cone_integral

    checks = {"lattice cone sum dominates the integral bound": cone_sum >= cone_integral}
    norm1 = weighted_l1(f, w2.with_alpha(a1))
    l1 = math.exp(-float(lw[idx]))               # 1 / w(v0; alpha2)
    if case == 1:
        denom = norm1 * l1
        checks["int_C f w <= ||f w_alpha1||"] = mass_cone <= denom * (1 + 1e-12)
    else:
        w3 = w2.with_alpha(a3)
        lw3_0 = float(log_weight_eval(w3, v0))
        denom = norm1 * math.exp(-lw3_0) * l1
        cone_pts = pts[in_cone]
        checks["|v0| < 2|v'| on the cone"] = bool(np.all(np.linalg.norm(v0) < 2.0 * np.linalg.norm(cone_pts, axis=-1)))
        lw3_2v = log_weight_eval(w3, 2.0 * cone_pts)
        checks["w(2v'; alpha3) >= w(v0; alpha3)"] = bool(np.all(lw3_2v >= lw3_0 - 1e-12))
        c2 = p2_constant(w2)
        lhs = log_weight_eval(w2, cone_pts) + lw3_2v
        rhs = log_weight_eval(w2.with_alpha(a2 + c2 * a3), cone_pts)
        checks["w(v'; alpha2) w(2v'; alpha3) <= w(v'; alpha2 + c2 alpha3)"] = bool(np.all(lhs <= rhs + 1e-9))
        checks["alpha2 + c2 alpha3 <= alpha1"] = a2 + c2 * a3 <= a1 * (1 + 1e-12)
        checks["int_C f w <= ||f w_alpha1|| / w(v0; alpha3)"] = mass_cone <= denom * (1 + 1e-12)
    case_integral = c * m_over_w ** (1 + nu / d) * A ** (1 + nu / d) / denom ** (nu / d)
    case_bound = -lam * scale * case_integral
    return Q11BoundReport(
        v0=v0, case=case, R=R, q11=terms.q11, cone_restricted=restricted,
        kernel_bound=kernel_bound, integral_bound=integral_bound, case_bound=case_bound,
        lam=lam, cone_constant=c, cone_measure=A, checks=checks,
    )


# ---------------------------------------------------------------------------
# conservative operator for time stepping (two dimensions)


@numba.njit(cache=True)
def _deposit(buf, ox, oy, x, y, weight):
    """Add weight times the quadratic B-spline of the point (x, y) (grid units) into buf."""
    cx = int(math.floor(x + 0.5))
    cy = int(math.floor(y + 0.5))
    tx = x - cx
    ty = y - cy
    wx0 = 0.5 * (0.5 - tx) ** 2
    wx1 = 0.75 - tx * tx
    wx2 = 0.5 * (0.5 + tx) ** 2
    wy0 = 0.5 * (0.5 - ty) ** 2
    wy1 = 0.75 - ty * ty
    wy2 = 0.5 * (0.5 + ty) ** 2
    bx = cx - 1 - ox
    by = cy - 1 - oy
    for a, wa in ((0, wx0), (1, wx1), (2, wx2)):
        for b, wb in ((0, wy0), (1, wy1), (2, wy2)):
            buf[bx + a, by + b] += weight * wa * wb


def _stencil_angles(radius, theta_min, order=4):
    """Half-circle angles in (-pi/2, pi/2) with grading near zero, and their weights."""
    width = min(math.pi / 16.0, 0.5 / max(radius, 1e-12))
    edges = [theta_min]
    while edges[-1] * 2.0 < width:
        edges.append(edges[-1] * 2.0)
    n_uniform = max(1, int(math.ceil((0.5 * math.pi - edges[-1]) / width)))
    edges = np.concatenate([edges[:-1], np.linspace(edges[-1], 0.5 * math.pi, n_uniform + 1)])
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    th = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
    wt = (0.5 * (b - a) * w).ravel()
    return np.concatenate([th, -th]), np.concatenate([wt, wt])


@numba.njit(cache=True)
def _build_stencil(mx, my, th, wb, buf, ox, oy):
    """Accumulate sum_theta wb [phi(v') + phi(v'_*) - phi(v) - phi(v_*)] relative to v = 0, v_* = m."""
    rad = 0.5 * math.sqrt(mx * mx + my * my)
    ux = -mx / (2.0 * rad)
    uy = -my / (2.0 * rad)
    cx = 0.5 * mx
    cy = 0.5 * my
    for k in range(th.shape[0]):
        c = math.cos(th[k])
        s = math.sin(th[k])
        sx = c * ux - s * uy
        sy = s * ux + c * uy
        wgt = wb[k]
        _deposit(buf, ox, oy, cx + rad * sx, cy + rad * sy, wgt)
        _deposit(buf, ox, oy, cx - rad * sx, cy - rad * sy, wgt)
        _deposit(buf, ox, oy, 0.0, 0.0, -wgt)
        _deposit(buf, ox, oy, float(mx), float(my), -wgt)


@numba.njit(cache=True, fastmath=True)
def _apply(vals, ms, rects, ptr, ex, ey, sv, scale, tol, out):
    N = vals.shape[0]
    out[:, :] = 0.0
    top = vals.max()
    thr = tol * top * top
    prod = np.zeros((N, N))
    lo = np.empty(N, dtype=np.int64)
    hi = np.empty(N, dtype=np.int64)
    for q in range(ms.shape[0]):
        mx = ms[q, 0]
        my = ms[q, 1]
        a0, a1, b0, b1 = rects[q, 0], rects[q, 1], rects[q, 2], rects[q, 3]
        active = False
        for a in range(a0, a1 + 1):
            lo[a] = b1 + 1
            hi[a] = b0 - 1
            for b in range(b0, b1 + 1):
                p = vals[a, b] * vals[a + mx, b + my]
                prod[a, b] = p
                if p > thr:
                    if lo[a] > b1:
                        lo[a] = b
                    hi[a] = b
            if hi[a] >= lo[a]:
                active = True
        if not active:
            continue
        for e in range(ptr[q], ptr[q + 1]):
            s = sv[e] * scale
            dx = ex[e]
            dy = ey[e]
            for a in range(a0, a1 + 1):
                start = lo[a]
                n = hi[a] - start + 1
                if n <= 0:
                    continue
                row_out = out[a + dx, start + dy:start + dy + n]
                row_p = prod[a, start:start + n]
                for b in range(n):
                    row_out[b] += s * row_p[b]


class GridCollisionOperator:
    """Conservative weak-form discretisation of Q(f, f) on a two-dimensional grid.

    Each node carries the point mass f_j h^2. A pair (j, k) collides through every
    sigma of the circle; both post-collision velocities and both pre-collision
    velocities are spread to the grid with quadratic B-splines. The spline
    reproduces 1, x and x^2 + const per axis, so every angular node conserves mass,
    momentum and energy exactly. Pairs whose collision circle leaves the region
    where deposition stays on the grid are dropped, which truncates the domain.

    The angular integral is symmetrised over sigma -> -sigma and cut at theta_min;
    the neglected part is O(theta_min^{2-nu}). Pairs with f_j f_k below
    pair_tolerance * max(f)^2 are skipped at evaluation time; since each pair
    conserves on its own this costs accuracy in the far tail only.
    """

    def __init__(self, grid: Grid, params: CollisionParams, theta_min: float = 1e-5, order: int = 4,
                 max_pair_distance: float | None = None, pair_tolerance: float = 1e-14):
        if grid.d != 2 or params.d != 2:
            raise NotImplementedError("the conservative grid operator is two-dimensional")
        self.grid = grid
        self.params = params
        self.pair_tolerance = pair_tolerance
        N, h = grid.N, grid.h
        reach = N if max_pair_distance is None else max_pair_distance / h
        ms, rects, ptr, ex, ey, sv = [], [], [0], [], [], []
        for mx in range(0, N):
            for my in range(-(N - 1), N):
                if mx == 0 and my <= 0:
                    continue
                norm = math.hypot(mx, my)
                if norm > reach:
                    continue
                rad = 0.5 * norm
                lo = [math.ceil(0.5 + rad - 0.5 * m) for m in (mx, my)]
                hi = [math.floor(N - 1.5 - rad - 0.5 * m - 1e-9) for m in (mx, my)]
                if lo[0] > hi[0] or lo[1] > hi[1]:
                    continue
                th, wt = _stencil_angles(rad, theta_min, order)
                s = np.abs(np.sin(th))
                b = params.c_pos * s ** params.pos_exponent + params.c_neg * s ** params.neg_exponent
                wb = wt * b * (norm * h) ** params.gamma
                o = int(math.floor(min(0.0, mx, 0.5 * mx - rad))) - 2
                oy = int(math.floor(min(0.0, my, 0.5 * my - rad))) - 2
                size_x = int(math.ceil(max(0.0, mx, 0.5 * mx + rad))) + 3 - o
                size_y = int(math.ceil(max(0.0, my, 0.5 * my + rad))) + 3 - oy
                buf = np.zeros((size_x, size_y))
                _build_stencil(mx, my, th, wb, buf, o, oy)
                nz = np.nonzero(buf)
                ms.append((mx, my))
                rects.append((lo[0], hi[0], lo[1], hi[1]))
                ex.append(nz[0] + o)
                ey.append(nz[1] + oy)
                sv.append(buf[nz])
                ptr.append(ptr[-1] + nz[0].size)
        self._ms = np.asarray(ms, dtype=np.int64)
        self._rects = np.asarray(rects, dtype=np.int64)
        self._ptr = np.asarray(ptr, dtype=np.int64)
        self._ex = np.concatenate(ex).astype(np.int64)
        self._ey = np.concatenate(ey).astype(np.int64)
        self._sv = np.concatenate(sv)
        self.n_entries = int(self._sv.size)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        out = np.empty(self.grid.shape)
        _apply(np.ascontiguousarray(values, dtype=float), self._ms, self._rects, self._ptr,
               self._ex, self._ey, self._sv, self.grid.h ** 2, self.pair_tolerance, out)
        return out
