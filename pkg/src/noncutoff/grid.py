"""Uniform velocity grids, distributions on them and their moments."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.special import gammaln

from .weights import (
    CONSTANT,
    MLSeriesConfig,
    Weight,
    log_mittag_leffler,
    log_weight_eval,
)

logger = logging.getLogger(__name__)

MAGIC = "BTGRID1"
TAIL_THRESHOLD = 1e-8


@dataclass(frozen=True)
class Grid:
    d: int = 2
    N: int = 48
    L: float = 8.0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"grid dimension must be 2 or 3, got {self.d}")
        if self.N < 16:
            raise ValueError(f"N must be at least 16, got {self.N}")
        if self.L < 6.0:
            raise ValueError(f"L must be at least 6, got {self.L}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.N - 1)

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    def axis(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.N)

    def points(self) -> np.ndarray:
        """Node coordinates, shape (N,)*d + (d,)."""
        ax = self.axis()
        return np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"), axis=-1)

    def speed_squared(self) -> np.ndarray:
        ax2 = self.axis() ** 2
        out = np.zeros(self.shape)
        for k in range(self.d):
            sl = [None] * self.d
            sl[k] = slice(None)
            out = out + ax2[tuple(sl)]
        return out

    def trapezoid_weights(self) -> np.ndarray:
        w1 = np.full(self.N, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        out = w1
        for _ in range(self.d - 1):
            out = np.multiply.outer(out, w1)
        return out

    def node(self, index) -> np.ndarray:
        return -self.L + self.h * np.asarray(index, dtype=float)

    def index_of(self, v) -> tuple:
        """Index of the node at v; raises if v is not (numerically) a node."""
        t = (np.asarray(v, dtype=float) + self.L) / self.h
        idx = np.rint(t)
        if np.any(np.abs(t - idx) > 1e-6) or np.any(idx < 0) or np.any(idx > self.N - 1):
            raise ValueError(f"velocity {np.asarray(v).tolist()} is not a grid node")
        return tuple(int(i) for i in idx)

    def interior_mask(self, radius: float | None = None) -> np.ndarray:
        """Nodes at distance <= radius from the origin (default L/2)."""
        radius = 0.5 * self.L if radius is None else radius
        return self.speed_squared() <= radius * radius * (1.0 + 1e-12)


@dataclass(frozen=True, eq=False)
class Distribution:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("distribution values must be finite")
        if np.any(vals < 0.0):
            raise ValueError("distribution values must be nonnegative")
        object.__setattr__(self, "values", vals)

    def scaled(self, lam: float) -> "Distribution":
        return Distribution(self.grid, lam * self.values)


@dataclass(frozen=True)
class StatsBounds:
    M0: float
    M1: float
    E0: float
    H0: float

    def __post_init__(self):
        if not 0.0 < self.M1 <= self.M0:
            raise ValueError("need 0 < M1 <= M0")
        if not (math.isfinite(self.E0) and math.isfinite(self.H0)):
            raise ValueError("E0 and H0 must be finite")
        if self.E0 <= 0.0 or self.H0 < 0.0:
            raise ValueError("need E0 > 0 and H0 >= 0 (H0 bounds the positive part of f log f)")

    @classmethod
    def from_distribution(cls, f: "Distribution", slack: float = 1e-6) -> "StatsBounds":
        """Bounds satisfied by f, widened by a relative slack.

        Using the measured values exactly puts the dyadic radius search on a knife
        edge for data such as the standard Maxwellian, where E0 = 2 M1.
        """
        m0 = mass(f)
        return cls(M0=m0 * (1.0 + slack), M1=m0 * (1.0 - slack), E0=energy(f) * (1.0 + slack),
                   H0=positive_entropy(f) * (1.0 + slack))


@dataclass(frozen=True, eq=False)
class LevelSet:
    r: float
    l: float
    m: float
    measured: float
    mask: np.ndarray


# ---------------------------------------------------------------------------
# construction and quadrature


def maxwellian(grid: Grid, rho: float = 1.0, u=None, T: float = 1.0) -> Distribution:
    u = np.zeros(grid.d) if u is None else np.asarray(u, dtype=float)
    if rho <= 0.0 or T <= 0.0:
        raise ValueError("rho and T must be positive")
    reach = grid.L - float(np.max(np.abs(u)))
    if reach <= 0.0 or math.exp(-reach * reach / (2.0 * T)) > TAIL_THRESHOLD:
        warnings.warn(
            f"Maxwellian (u={u.tolist()}, T={T}) is truncated by the cube [-{grid.L}, {grid.L}]^{grid.d}",
            stacklevel=2,
        )
    diff = grid.points() - u
    vals = rho * (2.0 * math.pi * T) ** (-grid.d / 2.0) * np.exp(-(diff * diff).sum(-1) / (2.0 * T))
    return Distribution(grid, vals)


def integrate(grid: Grid, values) -> float:
    """Trapezoid rule over the cube."""
    return float(np.sum(grid.trapezoid_weights() * values))


def mass(f: Distribution) -> float:
    return integrate(f.grid, f.values)


def momentum(f: Distribution) -> np.ndarray:
    pts = f.grid.points()
    w = f.grid.trapezoid_weights() * f.values
    return np.array([float(np.sum(w * pts[..., k])) for k in range(f.grid.d)])


def energy(f: Distribution) -> float:
    return integrate(f.grid, f.values * f.grid.speed_squared())


def moment_poly(f: Distribution, q: float) -> float:
    """int f <v>^q dv."""
    if q < 0:
        raise ValueError("q must be nonnegative")
    return integrate(f.grid, f.values * (1.0 + f.grid.speed_squared()) ** (0.5 * q))


def moment_exp(f: Distribution, alpha: float, s: float) -> float:
    """int f exp(alpha <v>^s) dv."""
    if alpha <= 0.0 or not 0.0 < s <= 2.0:
        raise ValueError("need alpha > 0 and 0 < s <= 2")
    expo = alpha * (1.0 + f.grid.speed_squared()) ** (0.5 * s)
    if expo.max() > 700.0:
        raise OverflowError("exponential weight overflows on this grid")
    return integrate(f.grid, f.values * np.exp(expo))


def moment_ml(f: Distribution, alpha: float, s: float, route: str = "direct", Q: int = 100) -> float:
    """Mittag-Leffler moment int f E_{2/s}(alpha^{2/s} <v>^2) dv.

    route="direct" integrates the weight; route="partial_sum" sums the renormalized
    polynomial moments m_{2q} alpha^{2q/s} / Gamma(2q/s + 1) for q <= Q.
    """
    a = 2.0 / s
    if route == "direct":
        arg = alpha ** a * (1.0 + f.grid.speed_squared())
        lw = log_mittag_leffler(a, arg, MLSeriesConfig(asymptotic_switch_x=2500.0 * alpha ** a))
        return integrate(f.grid, f.values * np.exp(lw))
    if route != "partial_sum":
        raise ValueError(f"unknown route {route!r}")
    if Q < 20:
        raise ValueError("partial_sum route needs Q >= 20")
    br2 = 1.0 + f.grid.speed_squared()
    tw = f.grid.trapezoid_weights() * f.values
    terms = np.empty(Q + 1)
    for q in range(Q + 1):
        m2q = float(np.sum(tw * br2 ** q))
        terms[q] = m2q * math.exp(2.0 * q / s * math.log(alpha) - gammaln(2.0 * q / s + 1.0))
    total = float(terms.sum())
    if terms[-1] > 1e-14 * total or terms[-1] > terms[-2]:
        raise RuntimeError(f"partial sum has not entered its decaying regime by Q={Q}")
    return total


def entropy(f: Distribution) -> float:
    """int f log f dv with 0 log 0 = 0."""
    v = f.values
    flogf = np.zeros_like(v)
    pos = v > 0.0
    flogf[pos] = v[pos] * np.log(v[pos])
    return integrate(f.grid, flogf)


def positive_entropy(f: Distribution) -> float:
    """int max(f log f, 0) dv, the part of the entropy the level-set bound relies on."""
    v = f.values
    big = v > 1.0
    return integrate(f.grid, np.where(big, v * np.log(np.where(big, v, 1.0)), 0.0))


def weighted_sup(f: Distribution, w: Weight):
    """max over nodes of f w and the first (lexicographically smallest) node attaining it."""
    if w.family == CONSTANT:
        prod = f.values
    else:
        lw = log_weight_eval(w, f.grid.points())
        with np.errstate(divide="ignore"):
            prod = np.exp(np.log(f.values) + lw)
    flat = int(np.argmax(prod))
    idx = np.unravel_index(flat, f.grid.shape)
    return float(prod[idx]), f.grid.node(idx)


def weighted_l1(f: Distribution, w: Weight) -> float:
    if w.family == CONSTANT:
        return mass(f)
    return integrate(f.grid, f.values * np.exp(log_weight_eval(w, f.grid.points())))


def tail_ratio(f: Distribution) -> float:
    """max over the boundary shell divided by the global max."""
    v = f.values
    top = v.max()
    if top == 0.0:
        return 0.0
    shell = np.zeros(v.shape, dtype=bool)
    for k in range(v.ndim):
        sl = [slice(None)] * v.ndim
        sl[k] = 0
        shell[tuple(sl)] = True
        sl[k] = -1
        shell[tuple(sl)] = True
    return float(v[shell].max() / top)


def ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0) * r ** d


def check_bounds(f: Distribution, bounds: StatsBounds, rtol: float = 1e-4) -> list[str]:
    problems = []
    m = mass(f)
    if m < bounds.M1 * (1.0 - rtol) or m > bounds.M0 * (1.0 + rtol):
        problems.append(f"mass {m:.6g} outside [{bounds.M1}, {bounds.M0}]")
    e = energy(f)
    if e > bounds.E0 * (1.0 + rtol):
        problems.append(f"energy {e:.6g} exceeds E0={bounds.E0}")
    h = positive_entropy(f)
    if h > bounds.H0 + rtol * max(1.0, abs(bounds.H0)):
        problems.append(f"positive part of the entropy {h:.6g} exceeds H0={bounds.H0}")
    return problems


def level_set_constants(f: Distribution, bounds: StatsBounds) -> LevelSet:
    """Radius r, level l and measure bound m of S = B_r intersect {f > l}.

    r is the smallest power of two with E0 / r^2 < M1 / 2, l = M1 / (16 |B_r|),
    and m = (M1 / 8) exp(-8 H0 / M1).
    """
    problems = check_bounds(f, bounds)
    if problems:
        raise ValueError("distribution violates the stated bounds: " + "; ".join(problems))
    g = f.grid
    k = math.floor(0.5 * math.log2(max(2.0 * bounds.E0 / bounds.M1, 1e-300)))
    while bounds.E0 / (2.0 ** k) ** 2 >= bounds.M1 / 2.0:
        k += 1
    while bounds.E0 / (2.0 ** (k - 1)) ** 2 < bounds.M1 / 2.0:
        k -= 1
    r = 2.0 ** k
    level = bounds.M1 / (16.0 * ball_volume(g.d, r))
    mask = (g.speed_squared() <= r * r) & (f.values > level)
    measured = float(mask.sum()) * g.cell_volume
    m = bounds.M1 / 8.0 * math.exp(-8.0 * bounds.H0 / bounds.M1)
    return LevelSet(r=r, l=level, m=m, measured=measured, mask=mask)


# ---------------------------------------------------------------------------
# off-grid evaluation: multilinear interpolation, zero outside the cube


@numba.njit(cache=True)
def interp2(vals, L, h, x, y):
    n = vals.shape[0]
    tx = (x + L) / h
    ty = (y + L) / h
    if tx < 0.0 or ty < 0.0 or tx > n - 1 or ty > n - 1:
        return 0.0
    i = min(int(tx), n - 2)
    j = min(int(ty), n - 2)
    ax = tx - i
    ay = ty - j
    return ((1.0 - ax) * ((1.0 - ay) * vals[i, j] + ay * vals[i, j + 1])
            + ax * ((1.0 - ay) * vals[i + 1, j] + ay * vals[i + 1, j + 1]))


@numba.njit(cache=True)
def interp3(vals, L, h, x, y, z):
    n = vals.shape[0]
    tx = (x + L) / h
    ty = (y + L) / h
    tz = (z + L) / h
    if tx < 0.0 or ty < 0.0 or tz < 0.0 or tx > n - 1 or ty > n - 1 or tz > n - 1:
        return 0.0
    i = min(int(tx), n - 2)
    j = min(int(ty), n - 2)
    k = min(int(tz), n - 2)
    ax = tx - i
    ay = ty - j
    az = tz - k
    c00 = (1.0 - az) * vals[i, j, k] + az * vals[i, j, k + 1]
    c01 = (1.0 - az) * vals[i, j + 1, k] + az * vals[i, j + 1, k + 1]
    c10 = (1.0 - az) * vals[i + 1, j, k] + az * vals[i + 1, j, k + 1]
    c11 = (1.0 - az) * vals[i + 1, j + 1, k] + az * vals[i + 1, j + 1, k + 1]
    return (1.0 - ax) * ((1.0 - ay) * c00 + ay * c01) + ax * ((1.0 - ay) * c10 + ay * c11)


@numba.njit(cache=True)
def _interp_many2(vals, L, h, pts):
    out = np.empty(pts.shape[0])
    for n in range(pts.shape[0]):
        out[n] = interp2(vals, L, h, pts[n, 0], pts[n, 1])
    return out


@numba.njit(cache=True)
def _interp_many3(vals, L, h, pts):
    out = np.empty(pts.shape[0])
    for n in range(pts.shape[0]):
        out[n] = interp3(vals, L, h, pts[n, 0], pts[n, 1], pts[n, 2])
    return out


def interpolate(f: Distribution, points) -> np.ndarray:
    """Multilinear interpolant of f at points of shape (..., d); zero outside the cube."""
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    flat = np.ascontiguousarray(pts.reshape(-1, f.grid.d))
    fn = _interp_many2 if f.grid.d == 2 else _interp_many3
    return fn(f.values, f.grid.L, f.grid.h, flat).reshape(shape)


# ---------------------------------------------------------------------------
# text serialization


def save_distribution(f: Distribution, path) -> None:
    g = f.grid
    lines = [MAGIC, str(g.d), str(g.N), repr(float(g.L))]
    lines.extend(repr(float(x)) for x in f.values.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def load_distribution(path) -> Distribution:
    lines = Path(path).read_text().split()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path} is not a {MAGIC} file")
    grid = Grid(d=int(lines[1]), N=int(lines[2]), L=float(lines[3]))
    vals = np.array([float(x) for x in lines[4:]])
    return Distribution(grid, vals.reshape(grid.shape))
