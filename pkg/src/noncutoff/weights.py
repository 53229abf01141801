"""Velocity weights w(v; alpha, p), the Mittag-Leffler function and P1-P4 validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.special import gammaln, logsumexp

EXPONENTIAL = "exponential"
MITTAG_LEFFLER = "mittag-leffler"
CONSTANT = "constant"
FAMILIES = (EXPONENTIAL, MITTAG_LEFFLER, CONSTANT)


class Family(str, Enum):
    Exponential = EXPONENTIAL
    MittagLeffler = MITTAG_LEFFLER
    Constant = CONSTANT


@dataclass(frozen=True)
class Weight:
    family: str = EXPONENTIAL
    alpha: float = 1.0
    p: float = 2.0

    def __post_init__(self):
        fam = Family(self.family).value
        object.__setattr__(self, "family", fam)
        if fam == CONSTANT:
            return
        if not self.alpha > 0.0:
            raise ValueError(f"weight rate alpha must be positive, got {self.alpha}")
        if not 0.0 < self.p <= 2.0:
            raise ValueError(f"weight order p must satisfy 0 < p <= 2, got {self.p}")

    def with_alpha(self, alpha: float) -> "Weight":
        return replace(self, alpha=alpha)

    def label(self) -> str:
        if self.family == CONSTANT:
            return "const"
        short = "exp" if self.family == EXPONENTIAL else "ml"
        return f"{short}_a{self.alpha:g}_p{self.p:g}"


@dataclass(frozen=True)
class MLSeriesConfig:
    max_terms: int = 6000
    tail_tolerance: float = 1e-15
    asymptotic_switch_x: float = 2500.0

    def __post_init__(self):
        if self.max_terms < 50:
            raise ValueError("max_terms must be at least 50")
        if not 0.0 < self.tail_tolerance < 1e-10:
            raise ValueError("tail_tolerance must lie in (0, 1e-10)")
        if self.asymptotic_switch_x <= 0.0:
            raise ValueError("asymptotic_switch_x must be positive")


def bracket(v):
    """Japanese bracket <v> = sqrt(1 + |v|^2) over the last axis."""
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


def _series_log_terms(a, x, q, derivative=False):
    logx = np.log(x)[:, None]
    if derivative:
        qq = q[1:]
        return np.log(qq)[None, :] + (qq - 1)[None, :] * logx - gammaln(a * qq + 1.0)[None, :]
    return q[None, :] * logx - gammaln(a * q + 1.0)[None, :]


def _log_ml_impl(a, x, cfg: MLSeriesConfig, derivative: bool):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(np.isnan(x)):
        raise ValueError("Mittag-Leffler argument must be nonnegative")
    flat = x.ravel()
    out = np.empty_like(flat)
    zero = flat == 0.0
    big = flat > cfg.asymptotic_switch_x
    mid = ~zero & ~big
    if derivative:
        out[zero] = -gammaln(a + 1.0)
    else:
        out[zero] = 0.0
    if np.any(mid):
        # the terms peak near q = x^{1/a}/a; keep a generous margin beyond it
        xmax = flat[mid].max()
        n_terms = int(min(cfg.max_terms, 3.0 * xmax ** (1.0 / a) / a + 80))
        q = np.arange(n_terms, dtype=float)
        lt = _series_log_terms(a, flat[mid], q, derivative)
        total = logsumexp(lt, axis=1)
        # terms must be decreasing at the cut and the last one negligible
        tail_ok = (lt[:, -1] - total < math.log(cfg.tail_tolerance)) & (lt[:, -1] <= lt[:, -2])
        if not np.all(tail_ok):
            worst = flat[mid][~tail_ok].max()
            raise RuntimeError(
                f"Mittag-Leffler series did not converge within {n_terms} terms (x={worst:g})"
            )
        out[mid] = total
    if np.any(big):
        xb = flat[big]
        y = xb ** (1.0 / a)
        if derivative:
            out[big] = y + (1.0 / a - 1.0) * np.log(xb) - 2.0 * math.log(a)
        else:
            out[big] = y - math.log(a)
    return out.reshape(x.shape)


def log_mittag_leffler(a: float, x, cfg: MLSeriesConfig | None = None):
    """log E_a(x) for x >= 0, summed in log space so large arguments do not overflow.

    Beyond cfg.asymptotic_switch_x the leading asymptotic (1/a) exp(x^{1/a}) is used;
    for a >= 1 its relative error is below a * x^{-1} exp(-x^{1/a}) / |Gamma(1-a)|,
    which is far under double precision at the default switch.
    """
    if a <= 0.0:
        raise ValueError("Mittag-Leffler parameter a must be positive")
    cfg = cfg or MLSeriesConfig()
    out = _log_ml_impl(a, x, cfg, derivative=False)
    return float(out) if out.ndim == 0 else out


def mittag_leffler(a: float, x, cfg: MLSeriesConfig | None = None):
    """E_a(x) = sum_q x^q / Gamma(a q + 1)."""
    out = np.exp(log_mittag_leffler(a, x, cfg))
    return float(out) if np.ndim(out) == 0 else out


def log_mittag_leffler_derivative(a: float, x, cfg: MLSeriesConfig | None = None):
    """log of dE_a/dx."""
    cfg = cfg or MLSeriesConfig()
    out = _log_ml_impl(a, x, cfg, derivative=True)
    return float(out) if out.ndim == 0 else out


def ml_config_for(w: Weight) -> MLSeriesConfig:
    # switch to the asymptotic form once <v> exceeds 50
    return MLSeriesConfig(asymptotic_switch_x=2500.0 * w.alpha ** (2.0 / w.p))


def log_weight_eval(w: Weight, v):
    """log w(v); v has shape (..., d)."""
    br = bracket(v)
    if w.family == CONSTANT:
        return np.zeros_like(br)
    if w.family == EXPONENTIAL:
        return w.alpha * br ** w.p
    a = 2.0 / w.p
    return log_mittag_leffler(a, w.alpha ** a * br * br, ml_config_for(w))


def weight_eval(w: Weight, v):
    """w(v): exp(alpha <v>^p), E_{2/p}(alpha^{2/p} <v>^2) or 1."""
    lw = np.asarray(log_weight_eval(w, v))
    if np.any(lw > 709.0):
        raise OverflowError("weight exceeds double range; use log_weight_eval")
    out = np.exp(lw)
    return float(out) if out.ndim == 0 else out


def grad_inv_weight(w: Weight, v):
    """Gradient of 1/w with respect to v; v has shape (..., d)."""
    v = np.asarray(v, dtype=float)
    if w.family == CONSTANT:
        return np.zeros_like(v)
    br = bracket(v)
    lw = log_weight_eval(w, v)
    if w.family == EXPONENTIAL:
        # grad w = w * alpha p <v>^{p-2} v
        scale = w.alpha * w.p * br ** (w.p - 2.0) * np.exp(-lw)
    else:
        a = 2.0 / w.p
        c = w.alpha ** a
        ld = log_mittag_leffler_derivative(a, c * br * br, ml_config_for(w))
        # grad w = E_a'(c <v>^2) * 2 c v
        scale = 2.0 * c * np.exp(ld - 2.0 * lw)
    return -np.asarray(scale)[..., None] * v


# ---------------------------------------------------------------------------
# property validation


@dataclass
class PropertyReport:
    weight: Weight
    passed: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def summary(self) -> str:
        lines = [f"weight {self.weight.label()}"]
        for key in sorted(self.passed):
            lines.append(f"  {key}: {'pass' if self.passed[key] else 'FAIL'}")
        for key in sorted(self.constants):
            lines.append(f"  {key} = {self.constants[key]:.6g}")
        lines.extend(f"  violation: {msg}" for msg in self.violations)
        return "\n".join(lines)


def _sample_points(grid_or_points, radius_min=8.0):
    pts = getattr(grid_or_points, "points", None)
    pts = pts() if callable(pts) else np.asarray(grid_or_points, dtype=float)
    pts = pts.reshape(-1, pts.shape[-1])
    rmax = np.sqrt((pts * pts).sum(axis=1)).max()
    if rmax < radius_min * (1.0 - 1e-12):
        raise ValueError(f"sample points must cover a ball of radius >= {radius_min}, got {rmax:g}")
    return pts


def p2_constant(w: Weight) -> float:
    """The P2 partner-rate factor c2; 2^p for the power-exponential families."""
    if w.family == CONSTANT:
        return 0.0
    return 2.0 ** w.p


def validate_P1_P4(w: Weight, partner_params, sample, k_range=None, c2=None) -> PropertyReport:
    """Check properties P1-P4 of a weight on sampled velocities.

    partner_params is an iterable of (alpha', p) pairs used for P2 and P3
    (only pairs with the same p as the weight are meaningful). sample is a
    Grid or an array of velocities covering a ball of radius >= 8. The
    returned report carries measured constants; a failure records the first
    offending sample.
    """
    pts = _sample_points(sample)
    d = pts.shape[1]
    k_range = tuple(k_range) if k_range is not None else (1, 2, 4, d + 1)
    rep = PropertyReport(weight=w)
    radius = np.sqrt((pts * pts).sum(axis=1))
    order = np.argsort(radius, kind="stable")
    br = bracket(pts)
    lw = log_weight_eval(w, pts)
    tol = 1e-12

    # P1: positive, radially nondecreasing, nondecreasing in alpha
    diffs = np.diff(lw[order])
    mono_v = np.all(diffs >= -tol * np.maximum(1.0, np.abs(lw[order][1:])))
    if not mono_v:
        i = order[1:][np.argmax(diffs < -tol)]
        rep.violations.append(f"P1 radial monotonicity fails near v={pts[i].tolist()}")
    if w.family == CONSTANT:
        mono_a = True
    else:
        lw_up = log_weight_eval(w.with_alpha(w.alpha * 1.5), pts)
        mono_a = bool(np.all(lw_up >= lw - tol))
        if not mono_a:
            i = int(np.argmax(lw_up < lw - tol))
            rep.violations.append(f"P1 monotonicity in alpha fails at v={pts[i].tolist()}")
    rep.passed["P1"] = bool(mono_v and mono_a and np.all(np.isfinite(lw)))

    # P2: w(v; a) w(2v; a') <= C w(v; a + c2 a').  On a bounded sample C is always
    # finite, so a wrong c2 is detected by the log-ratio still growing linearly in
    # <v>^p over the outer half of the sample.
    c2 = p2_constant(w) if c2 is None else c2
    rep.constants["c2"] = c2
    p2_ok = True
    log_c = 0.0 if w.family == CONSTANT else -np.inf
    partners = [(float(a), float(p)) for a, p in partner_params]
    outer = radius >= 0.5 * radius.max()
    for a2, p in partners:
        if w.family == CONSTANT:
            break
        partner = Weight(w.family, a2, p)
        combined = Weight(w.family, w.alpha + c2 * a2, p)
        ratio = lw + log_weight_eval(partner, 2.0 * pts) - log_weight_eval(combined, pts)
        log_c = max(log_c, float(ratio.max()))
        slope = np.polyfit(br[outer] ** w.p, ratio[outer], 1)[0]
        rep.constants[f"P2_slope_a{a2:g}"] = float(slope)
        if slope > 0.05 * a2:
            p2_ok = False
            rep.violations.append(f"P2 ratio keeps growing like <v>^p for alpha'={a2} (slope {slope:.3g})")
    rep.constants["P2_C"] = math.exp(log_c)
    rep.passed["P2"] = bool(p2_ok and np.isfinite(log_c))

    # P3: for delta alpha < alpha', w^delta / w' <= C <v>^-k; reversed inequality otherwise
    p3_ok = w.family != CONSTANT
    if w.family == CONSTANT:
        rep.violations.append("P3 cannot hold for a constant weight")
    upper_c, lower_d = 0.0, np.inf
    # the weights are radial, so the asymptotic trend is read off one ray reaching
    # far beyond the sample, where slowly growing weights have left their quadratic regime
    ray = np.zeros((400, d))
    ray[:, 0] = np.geomspace(radius.max(), 1e4, 400)
    ray_br = np.log(bracket(ray))
    ray_lw = log_weight_eval(w, ray) if w.family != CONSTANT else None
    kmax = max(k_range)
    for a2, p in partners:
        if w.family == CONSTANT:
            break
        partner = Weight(w.family, a2, p)
        lwp = log_weight_eval(partner, pts)
        ray_lwp = log_weight_eval(partner, ray)
        for delta, decaying in ((0.5 * a2 / w.alpha, True), (2.0 * a2 / w.alpha, False)):
            ratio = delta * lw - lwp
            far = (delta * ray_lw - ray_lwp + (kmax if decaying else -kmax) * ray_br)[200:]
            trend = np.diff(far)
            if decaying:
                ok = np.all(trend <= 1e-9)
                for k in k_range:
                    upper_c = max(upper_c, float(np.exp(ratio + k * np.log(br)).max()))
            else:
                ok = np.all(trend >= -1e-9)
                for k in k_range:
                    lower_d = min(lower_d, float(np.exp(ratio - k * np.log(br)).min()))
            if not ok:
                p3_ok = False
                rep.violations.append(
                    f"P3 {'decay' if decaying else 'growth'} trend fails for alpha'={a2}, delta={delta:g}"
                )
    rep.constants["P3_C"] = upper_c
    rep.constants["P3_D"] = lower_d if np.isfinite(lower_d) else 0.0
    rep.passed["P3"] = bool(p3_ok and upper_c < np.inf and lower_d > 0.0)

    # P4: |grad(1/w)| <= C <v>
    g = np.sqrt((grad_inv_weight(w, pts) ** 2).sum(axis=1))
    rep.constants["P4_C"] = float((g / br).max())
    rep.passed["P4"] = bool(np.all(np.isfinite(g)))
    return rep


def ml_exp_equivalence(alpha: float, s: float, x_max: float = 20.0, n: int = 10_000):
    """(min, max) over x in [0, x_max] of E_{2/s}(alpha^{2/s} x^2) / exp(alpha x^s)."""
    if alpha <= 0.0 or not 0.0 < s <= 2.0:
        raise ValueError("need alpha > 0 and 0 < s <= 2")
    if x_max < 10.0:
        raise ValueError("x_max must be at least 10")
    x = np.linspace(0.0, x_max, n)
    a = 2.0 / s
    cfg = MLSeriesConfig(asymptotic_switch_x=max(2500.0 * alpha ** a, 1.0))
    lr = log_mittag_leffler(a, alpha ** a * x * x, cfg) - alpha * x ** s
    return float(np.exp(lr.min())), float(np.exp(lr.max()))


def alpha_cascade(alpha0: float, c2: float, d: int, nu: float, safety: float = 0.9):
    """Rates (alpha1, alpha2, alpha3) used by the tail-propagation argument.

    alpha1 = alpha0 / 2, alpha2 = safety * alpha1 / (1 + 2 c2 d / nu), alpha3 = 2 alpha2 d / nu.
    With safety = 1 the first constraint holds with equality.
    """
    if alpha0 <= 0.0 or c2 <= 0.0:
        raise ValueError("alpha0 and c2 must be positive")
    if not 0.0 < safety <= 1.0:
        raise ValueError("safety must lie in (0, 1]")
    alpha1 = 0.5 * alpha0
    alpha2 = safety * alpha1 / (1.0 + 2.0 * c2 * d / nu)
    alpha3 = 2.0 * alpha2 * d / nu
    lhs = alpha2 + c2 * alpha3
    if safety < 1.0:
        assert lhs < alpha1, "alpha2 + c2 alpha3 < alpha1 violated"
    else:
        assert lhs <= alpha1 * (1.0 + 1e-12), "alpha2 + c2 alpha3 <= alpha1 violated"
    assert alpha3 * nu / d > alpha2, "alpha3 nu / d > alpha2 violated"
    return alpha1, alpha2, alpha3
