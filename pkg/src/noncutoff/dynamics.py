"""Time integration of df/dt = Q(f, f) and tail diagnostics along the way."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .grid import Distribution, energy, entropy, integrate, mass, momentum
from .weights import bracket, log_weight_eval

logger = logging.getLogger(__name__)

EULER = "euler"
RK4 = "rk4"


class InstabilityError(RuntimeError):
    """Raised when a step clips more negative mass than allowed."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class SimConfig:
    T_final: float = 1.0
    dt: float = 2e-3
    method: str = RK4
    record_every: int = 5
    weights_tracked: tuple = ()
    envelope: object = "fit"          # "fit" or (a, b)
    generation_alpha: float = 0.05
    clip_threshold: float = 1e-6      # allowed clipped mass per step, relative to total mass
    stability_limit: float = 0.2
    keep_snapshots: bool = False

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if not self.T_final > 0.0:
            raise ValueError("T_final must be positive")
        if self.method not in (EULER, RK4):
            raise ValueError(f"method must be '{EULER}' or '{RK4}'")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")
        if self.envelope != "fit":
            a, b = self.envelope
            if a <= 0.0 or b < 0.0:
                raise ValueError("envelope needs a > 0 and b >= 0")
        object.__setattr__(self, "weights_tracked", tuple(self.weights_tracked))

    @property
    def n_steps(self) -> int:
        return int(round(self.T_final / self.dt))


@dataclass
class DiagnosticSeries:
    times: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    momentum: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    m_w: list = field(default_factory=list)        # per tracked weight: sup of f w
    l1_w: list = field(default_factory=list)       # per tracked weight: int f w
    exp_moment_gamma: list = field(default_factory=list)
    clipped: list = field(default_factory=list)    # clipped mass since the previous record
    labels: tuple = ()
    snapshots: list = field(default_factory=list)  # (t, values) when requested

    def column(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    def weight_series(self, index: int) -> np.ndarray:
        return np.asarray([row[index] for row in self.m_w])

    def l1_series(self, index: int) -> np.ndarray:
        return np.asarray([row[index] for row in self.l1_w])

    def validate(self) -> None:
        t = np.asarray(self.times)
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("times must be strictly increasing")
        for name in ("mass", "momentum", "energy", "entropy", "m_w", "l1_w", "exp_moment_gamma"):
            if not np.all(np.isfinite(np.asarray(getattr(self, name), dtype=float))):
                raise ValueError(f"non-finite entry in {name}")

    def header(self) -> list:
        d = len(self.momentum[0]) if self.momentum else 0
        cols = ["t", "mass"] + [f"momentum_{k}" for k in range(d)] + ["energy", "entropy"]
        cols += [f"sup_{lab}" for lab in self.labels] + [f"l1_{lab}" for lab in self.labels]
        return cols + ["exp_moment_gamma", "clipped_mass"]

    def rows(self):
        for k, t in enumerate(self.times):
            yield ([t, self.mass[k], *self.momentum[k], self.energy[k], self.entropy[k], *self.m_w[k],
                    *self.l1_w[k], self.exp_moment_gamma[k], self.clipped[k]])


def write_csv(series: DiagnosticSeries, path) -> None:
    """One row per recorded time, 12 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(series.header())
        for row in series.rows():
            w.writerow([f"{float(x):.11e}" for x in row])


# ---------------------------------------------------------------------------
# stepping


def _clip(values: np.ndarray, grid) -> tuple[np.ndarray, float]:
    neg = values < 0.0
    if not neg.any():
        return values, 0.0
    lost = -integrate(grid, np.where(neg, values, 0.0))
    return np.where(neg, 0.0, values), lost


def step(f: Distribution, dt: float, operator, method: str = RK4, clip_threshold: float = 1e-6,
         time: float | None = None) -> tuple[Distribution, float]:
    """Advance f by dt with operator(values) -> Q values. Returns (f_new, clipped mass)."""
    if dt < 0.0:
        raise ValueError("dt must be nonnegative")
    if dt == 0.0:
        return f, 0.0
    y = f.values
    if method == EULER:
        new = y + dt * operator(y)
    elif method == RK4:
        k1 = operator(y)
        k2 = operator(y + 0.5 * dt * k1)
        k3 = operator(y + 0.5 * dt * k2)
        k4 = operator(y + dt * k3)
        new = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        raise ValueError(f"unknown method {method!r}")
    new, lost = _clip(new, f.grid)
    total = mass(f)
    if total > 0.0 and lost > clip_threshold * total:
        raise InstabilityError(f"clipped mass {lost:.3e} exceeds {clip_threshold:g} of total {total:.6g}", time)
    if lost > 0.0:
        logger.debug("clipped negative mass %.3e", lost)
    return Distribution(f.grid, new), lost


def stability_number(f: Distribution, dt: float, operator) -> float:
    """dt * max|Q| / max f at the current state."""
    top = float(f.values.max())
    if top == 0.0:
        return 0.0
    return dt * float(np.abs(operator(f.values)).max()) / top


class _Recorder:
    def __init__(self, grid, sim: SimConfig, params_gamma: float, series: DiagnosticSeries):
        pts = grid.points()
        self.grid = grid
        self.sim = sim
        self.gamma = params_gamma
        self.series = series
        self.log_w = [log_weight_eval(w, pts) for w in sim.weights_tracked]
        self.bracket_gamma = bracket(pts) ** params_gamma

    def __call__(self, t: float, f: Distribution, clipped: float):
        s = self.series
        s.times.append(float(t))
        s.mass.append(mass(f))
        s.momentum.append([float(x) for x in momentum(f)])
        s.energy.append(energy(f))
        s.entropy.append(entropy(f))
        with np.errstate(divide="ignore"):
            logf = np.log(f.values)
        s.m_w.append([float(np.exp(np.max(logf + lw))) for lw in self.log_w])
        s.l1_w.append([integrate(self.grid, f.values * np.exp(lw)) for lw in self.log_w])
        rate = self.sim.generation_alpha * min(t, 1.0)
        s.exp_moment_gamma.append(integrate(self.grid, f.values * np.exp(rate * self.bracket_gamma)))
        s.clipped.append(float(clipped))
        if self.sim.keep_snapshots:
            s.snapshots.append((float(t), f.values.copy()))


def simulate(f0: Distribution, sim: SimConfig, operator, gamma: float) -> DiagnosticSeries:
    """Integrate to T_final, recording every record_every steps (and at t=0 and the end).

    operator(values) -> Q values on the grid; gamma is the speed exponent used by
    the generated exponential moment.
    """
    if np.any(f0.values < 0.0):
        raise ValueError("initial datum must be nonnegative")
    nu = stability_number(f0, sim.dt, operator)
    if nu > sim.stability_limit:
        raise ValueError(f"dt too large: dt max|Q|/max f = {nu:.3g} exceeds {sim.stability_limit}")
    series = DiagnosticSeries(labels=tuple(w.label() for w in sim.weights_tracked))
    record = _Recorder(f0.grid, sim, gamma, series)
    f = f0
    record(0.0, f, 0.0)
    clipped = 0.0
    n = sim.n_steps
    for k in range(1, n + 1):
        t_prev = (k - 1) * sim.dt
        f, lost = step(f, sim.dt, operator, sim.method, sim.clip_threshold, time=t_prev)
        clipped += lost
        if k % sim.record_every == 0 or k == n:
            record(k * sim.dt, f, clipped)
            clipped = 0.0
    series.validate()
    return series


# ---------------------------------------------------------------------------
# envelope diagnostics


@dataclass
class EnvelopeReport:
    passed: bool
    min_slack: float
    first_violation: float | None
    checked: int


def envelope_check(series: DiagnosticSeries, weight_index: int, a: float, b: float, d: int, nu: float,
                   times=None) -> EnvelopeReport:
    """m_w(t) < a + b t^{-d/nu} at every recorded t > 0 (optionally only at `times`)."""
    t = np.asarray(series.times, dtype=float)
    m = series.weight_series(weight_index)
    sel = t > 0.0
    if times is not None:
        sel &= np.isin(t, np.asarray(times, dtype=float))
    t, m = t[sel], m[sel]
    if t.size == 0:
        raise ValueError("no recorded times to check")
    slack = a + b * t ** (-d / nu) - m
    bad = np.nonzero(slack <= 0.0)[0]
    return EnvelopeReport(
        passed=bad.size == 0,
        min_slack=float(slack.min()),
        first_violation=float(t[bad[0]]) if bad.size else None,
        checked=int(t.size),
    )


def fit_envelope(series: DiagnosticSeries, weight_index: int, d: int, nu: float,
                 margin: float = 0.1) -> tuple[float, float]:
    """Tightest a + b t^{-d/nu} (a, b >= 0) covering the first half of the series, inflated by margin.

    Only the first half of the recorded times t > 0 is used, so the second half
    (see holdout_times) is an honest holdout.
    """
    t = np.asarray(series.times, dtype=float)
    m = series.weight_series(weight_index)
    keep = t > 0.0
    t, m = t[keep], m[keep]
    if t.size < 8:
        raise ValueError("fit_envelope needs at least 8 recorded times after t=0")
    half = t.size // 2
    # scale time so the columns of the LP are of comparable size
    s = (t[:half] / t[half - 1]) ** (-d / nu)
    res = linprog(c=[half, s.sum()], A_ub=-np.stack([np.ones(half), s], axis=1), b_ub=-m[:half],
                  bounds=[(0.0, None), (0.0, None)], method="highs")
    if not res.success:
        raise RuntimeError(f"envelope fit failed: {res.message}")
    a, b_scaled = res.x
    b = b_scaled * t[half - 1] ** (d / nu)
    return (1.0 + margin) * float(a), (1.0 + margin) * float(b)


def holdout_times(series: DiagnosticSeries) -> np.ndarray:
    t = np.asarray(series.times, dtype=float)
    t = t[t > 0.0]
    return t[t.size // 2:]


@dataclass
class GenerationReport:
    bound: float
    initial: float
    ratio_to_initial: float
    passed: bool


def moment_generation_check(series: DiagnosticSeries, alpha: float, gamma: float) -> GenerationReport:
    """sup over recorded t of int f exp(alpha min(t,1) <v>^gamma); bounded and within 2x of t=0."""
    vals = np.asarray(series.exp_moment_gamma, dtype=float)
    if vals.size == 0:
        raise ValueError("empty series")
    bound = float(vals.max())
    initial = float(vals[0])
    ratio = bound / initial if initial > 0.0 else math.inf
    return GenerationReport(bound=bound, initial=initial, ratio_to_initial=ratio,
                            passed=bool(np.isfinite(bound) and ratio <= 2.0))
