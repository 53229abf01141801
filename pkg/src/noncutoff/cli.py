"""Command-line front end: run configuration, presets and report emission.

Usage::

    noncutoff <command> (--config PATH | --preset NAME) [--out DIR] [--seed N]

Exit status is 0 when every check of the command passes, 1 when a check
fails (a JSON failure list goes to stderr) and 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import carleman, collision, dynamics, grid, kernel, weights
from .carleman import HyperplaneQuad, IdentityQuad
from .collision import CollisionQuads, GridCollisionOperator, SplitConfig
from .dynamics import SimConfig
from .grid import Distribution, Grid, StatsBounds
from .kernel import CollisionParams
from .weights import Weight

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "validate-weights", "validate-kernel", "carleman-check", "cone-check", "envelope-report")
OUT_ENV = "NONCUTOFF_OUT"
DEFAULT_OUT = "noncutoff-out"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InitialData:
    """Equal-mass sum of Maxwellians with a common temperature."""

    centers: tuple = ((0.0, 0.0),)
    temperature: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(float(x) for x in c) for c in self.centers))
        if not self.centers:
            raise ValueError("initial data needs at least one center")
        if len({len(c) for c in self.centers}) != 1:
            raise ValueError("all centers must have the same dimension")
        if self.temperature <= 0.0 or self.mass <= 0.0:
            raise ValueError("temperature and mass must be positive")

    def build(self, g: Grid) -> Distribution:
        if len(self.centers[0]) != g.d:
            raise ValueError(f"centers have dimension {len(self.centers[0])}, grid has {g.d}")
        vals = np.zeros(g.shape)
        share = self.mass / len(self.centers)
        for c in self.centers:
            vals += grid.maxwellian(g, rho=share, u=c, T=self.temperature).values
        return Distribution(g, vals)


@dataclass(frozen=True)
class WeightSet:
    """Explicit weights plus the (alpha1, alpha2) pairs produced by the rate cascade."""

    tracked: tuple = ()
    alpha0: float = 0.5
    cascade_families: tuple = ()
    cascade_orders: tuple = ()
    safety: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "tracked", tuple(self.tracked))
        object.__setattr__(self, "cascade_families", tuple(weights.Family(f).value for f in self.cascade_families))
        object.__setattr__(self, "cascade_orders", tuple(float(p) for p in self.cascade_orders))
        if self.alpha0 <= 0.0:
            raise ValueError("alpha0 must be positive")

    def cascades(self, params: CollisionParams):
        """[(family, p, (alpha1, alpha2, alpha3))] for every family and order."""
        out = []
        for fam in self.cascade_families:
            for p in self.cascade_orders:
                c2 = weights.p2_constant(Weight(fam, 1.0, p))
                out.append((fam, p, weights.alpha_cascade(self.alpha0, c2, params.d, params.nu, self.safety)))
        return out

    def all_weights(self, params: CollisionParams) -> tuple:
        out = list(self.tracked)
        for fam, p, (a1, a2, _) in self.cascades(params):
            out += [Weight(fam, a2, p), Weight(fam, a1, p)]
        return tuple(dict.fromkeys(out))


@dataclass(frozen=True)
class QuadSettings:
    n_radial: int = 256
    theta_min: float = 1e-3
    theta_order: int = 6
    operator_theta_min: float = 1e-5
    operator_order: int = 4
    pair_tolerance: float = 1e-14
    identity_angles: int = 96
    identity_radii: int = 96
    sphere_nodes: int = 256
    kernel_pairs: int = 1000
    cone_samples: int = 64

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"quadrature setting {f.name} must be positive")
        if self.sphere_nodes % 2:
            raise ValueError("sphere_nodes must be even")

    def hyperplane(self) -> HyperplaneQuad:
        return HyperplaneQuad(n_radial=self.n_radial)

    def collision(self) -> CollisionQuads:
        return CollisionQuads(hyper=self.hyperplane(), theta_min=self.theta_min, theta_order=self.theta_order)

    def identity(self) -> IdentityQuad:
        return IdentityQuad(n_angle=self.identity_angles, n_radius=self.identity_radii,
                            theta_min=self.theta_min, theta_order=self.theta_order, hyper=self.hyperplane())


@dataclass(frozen=True)
class RunConfig:
    command: str = "simulate"
    name: str = "custom"
    seed: int = 0
    params: CollisionParams = field(default_factory=CollisionParams)
    N: int = 48
    L: float = 8.0
    initial: InitialData = field(default_factory=InitialData)
    weights: WeightSet = field(default_factory=WeightSet)
    sim: SimConfig = field(default_factory=SimConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    quad: QuadSettings = field(default_factory=QuadSettings)
    cone_speeds: tuple = (0.0, 2.0, 4.0, 6.0)
    dump_distributions: bool = True

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        object.__setattr__(self, "cone_speeds", tuple(float(s) for s in self.cone_speeds))
        if self.sim.weights_tracked:
            raise ValueError("tracked weights belong in the weights section")
        if self.split.weight.family != weights.CONSTANT:
            raise ValueError("the split weight is chosen per check; leave it constant in the config")
        self.grid()

    def grid(self) -> Grid:
        return Grid(d=self.params.d, N=self.N, L=self.L)


# ---------------------------------------------------------------------------
# presets

_BIMODAL = InitialData(centers=((2.0, 0.0), (-2.0, 0.0)), temperature=0.5, mass=1.0)


def _presets() -> dict:
    base = RunConfig()
    return {
        "maxwellian-2d": replace(base, command="carleman-check", name="maxwellian-2d"),
        "bimodal-2d": replace(base, command="simulate", name="bimodal-2d", initial=_BIMODAL,
                              weights=WeightSet(cascade_families=(weights.EXPONENTIAL,), cascade_orders=(1.0,))),
        "shifted-bump-2d": replace(base, command="simulate", name="shifted-bump-2d",
                                   initial=InitialData(centers=((1.5, 0.5),), temperature=0.5, mass=1.0),
                                   weights=WeightSet(cascade_families=(weights.EXPONENTIAL,), cascade_orders=(1.0,))),
        "cone-2d": replace(base, command="cone-check", name="cone-2d"),
        "ml-weights": replace(base, command="envelope-report", name="ml-weights", initial=_BIMODAL,
                              weights=WeightSet(cascade_families=(weights.MITTAG_LEFFLER,), cascade_orders=(1.0,))),
    }


PRESET_NAMES = tuple(_presets())


def preset(name: str) -> RunConfig:
    table = _presets()
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(table)}")
    return table[name]


# ---------------------------------------------------------------------------
# text format: configparser sections, floats written with repr so reading back is exact


def _num(x) -> str:
    return repr(float(x))


def _opt(x) -> str:
    return "none" if x is None else _num(x)


def _weights_text(ws) -> str:
    return ", ".join(f"{w.family}:{_num(w.alpha)}:{_num(w.p)}" for w in ws)


def serialize(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"command": cfg.command, "name": cfg.name, "seed": str(cfg.seed),
                 "dump_distributions": "yes" if cfg.dump_distributions else "no"}
    p = cfg.params
    cp["collision"] = {"d": str(p.d), "gamma": _num(p.gamma), "nu": _num(p.nu),
                       "c_pos": _num(p.c_pos), "c_neg": _num(p.c_neg)}
    cp["grid"] = {"N": str(cfg.N), "L": _num(cfg.L)}
    ini = cfg.initial
    cp["initial"] = {"centers": "; ".join(", ".join(_num(x) for x in c) for c in ini.centers),
                     "temperature": _num(ini.temperature), "mass": _num(ini.mass)}
    ws = cfg.weights
    cp["weights"] = {"tracked": _weights_text(ws.tracked), "alpha0": _num(ws.alpha0),
                     "cascade_families": ", ".join(ws.cascade_families),
                     "cascade_orders": ", ".join(_num(x) for x in ws.cascade_orders), "safety": _num(ws.safety)}
    s = cfg.sim
    env = "fit" if s.envelope == "fit" else ", ".join(_num(x) for x in s.envelope)
    cp["sim"] = {"T_final": _num(s.T_final), "dt": _num(s.dt), "method": s.method,
                 "record_every": str(s.record_every), "envelope": env,
                 "generation_alpha": _num(s.generation_alpha), "clip_threshold": _num(s.clip_threshold),
                 "stability_limit": _num(s.stability_limit), "keep_snapshots": "yes" if s.keep_snapshots else "no"}
    sp = cfg.split
    cp["split"] = {"exclusion_radius": _opt(sp.exclusion_radius), "unit_ball_radius": _num(sp.unit_ball_radius),
                   "q2_mode": sp.q2_mode, "conv_constant": _opt(sp.conv_constant)}
    q = cfg.quad
    cp["quadrature"] = {f.name: (str(getattr(q, f.name)) if isinstance(getattr(q, f.name), int)
                                 else _num(getattr(q, f.name))) for f in fields(q)}
    cp["cone"] = {"speeds": ", ".join(_num(x) for x in cfg.cone_speeds)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _floats(text: str) -> tuple:
    text = text.strip()
    return tuple(float(x) for x in text.split(",")) if text else ()


def _parse_weights(text: str) -> tuple:
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"weight {item!r} must read family:alpha:p")
        out.append(Weight(parts[0].strip(), float(parts[1]), float(parts[2])))
    return tuple(out)


def _optional(text: str):
    return None if text.strip().lower() == "none" else float(text)


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read a config; missing sections or keys keep the values of `base` (defaults if None)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or RunConfig()
    known = {"run", "collision", "grid", "initial", "weights", "sim", "split", "quadrature", "cone"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")

    def sec(name):
        return cp[name] if cp.has_section(name) else {}

    try:
        if "preset" in sec("run"):
            cfg = preset(sec("run")["preset"])
        run = sec("run")
        p = cfg.params
        c = sec("collision")
        params = CollisionParams(
            d=int(c.get("d", p.d)), gamma=float(c.get("gamma", p.gamma)), nu=float(c.get("nu", p.nu)),
            c_pos=float(c.get("c_pos", p.c_pos)), c_neg=float(c.get("c_neg", p.c_neg)),
        )
        gsec = sec("grid")
        ini = cfg.initial
        isec = sec("initial")
        if "centers" in isec:
            centers = tuple(_floats(c) for c in isec["centers"].split(";"))
        else:
            centers = ini.centers
        initial = InitialData(centers=centers, temperature=float(isec.get("temperature", ini.temperature)),
                              mass=float(isec.get("mass", ini.mass)))
        ws = cfg.weights
        wsec = sec("weights")
        wset = WeightSet(
            tracked=_parse_weights(wsec["tracked"]) if "tracked" in wsec else ws.tracked,
            alpha0=float(wsec.get("alpha0", ws.alpha0)),
            cascade_families=(tuple(filter(None, (x.strip() for x in wsec["cascade_families"].split(","))))
                              if "cascade_families" in wsec else ws.cascade_families),
            cascade_orders=_floats(wsec["cascade_orders"]) if "cascade_orders" in wsec else ws.cascade_orders,
            safety=float(wsec.get("safety", ws.safety)),
        )
        s = cfg.sim
        ssec = sec("sim")
        env = ssec.get("envelope", None)
        if env is None:
            envelope = s.envelope
        elif env.strip() == "fit":
            envelope = "fit"
        else:
            envelope = _floats(env)
        sim = SimConfig(
            T_final=float(ssec.get("T_final", s.T_final)), dt=float(ssec.get("dt", s.dt)),
            method=ssec.get("method", s.method), record_every=int(ssec.get("record_every", s.record_every)),
            envelope=envelope, generation_alpha=float(ssec.get("generation_alpha", s.generation_alpha)),
            clip_threshold=float(ssec.get("clip_threshold", s.clip_threshold)),
            stability_limit=float(ssec.get("stability_limit", s.stability_limit)),
            keep_snapshots=_bool(ssec.get("keep_snapshots", None), s.keep_snapshots),
        )
        sp = cfg.split
        spsec = sec("split")
        split = SplitConfig(
            exclusion_radius=_optional(spsec["exclusion_radius"]) if "exclusion_radius" in spsec
            else sp.exclusion_radius,
            unit_ball_radius=float(spsec.get("unit_ball_radius", sp.unit_ball_radius)),
            q2_mode=spsec.get("q2_mode", sp.q2_mode),
            conv_constant=_optional(spsec["conv_constant"]) if "conv_constant" in spsec else sp.conv_constant,
        )
        qsec = sec("quadrature")
        qkw = {}
        for f in fields(QuadSettings):
            if f.name in qsec:
                cast = int if isinstance(getattr(cfg.quad, f.name), int) else float
                qkw[f.name] = cast(qsec[f.name])
        quad = replace(cfg.quad, **qkw)
        speeds = _floats(sec("cone")["speeds"]) if "speeds" in sec("cone") else cfg.cone_speeds
        return RunConfig(
            command=run.get("command", cfg.command), name=run.get("name", cfg.name),
            seed=int(run.get("seed", cfg.seed)), params=params,
            N=int(gsec.get("N", cfg.N)), L=float(gsec.get("L", cfg.L)), initial=initial, weights=wset,
            sim=sim, split=split, quad=quad, cone_speeds=speeds,
            dump_distributions=_bool(run.get("dump_distributions", None), cfg.dump_distributions),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _bool(text, default: bool) -> bool:
    if text is None:
        return default
    t = text.strip().lower()
    if t in ("yes", "true", "1", "on"):
        return True
    if t in ("no", "false", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class Outcome:
    """What a command produced: CSV table, report lines and named checks."""

    header: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    report: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)        # name -> (passed, detail)
    dumps: dict = field(default_factory=dict)         # file name -> Distribution

    def check(self, name: str, passed, detail: str = "") -> None:
        self.checks[name] = (bool(passed), detail)

    @property
    def failures(self) -> list:
        return [{"check": k, "detail": d} for k, (ok, d) in self.checks.items() if not ok]


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return f"{float(x):.11e}"


def _rng(cfg: RunConfig) -> np.random.Generator:
    return np.random.default_rng(cfg.seed)


def _weight_sample(cfg: RunConfig, rng) -> np.ndarray:
    """Grid points plus seeded points in the ball of radius 10."""
    g = cfg.grid()
    d = g.d
    extra = rng.normal(size=(2000, d))
    extra *= (10.0 * rng.random(2000) ** (1.0 / d) / np.linalg.norm(extra, axis=1))[:, None]
    edge = np.zeros((1, d))
    edge[0, 0] = 10.0
    return np.concatenate([g.points().reshape(-1, d), extra, edge])


def default_weight_matrix() -> tuple:
    out = [Weight(weights.EXPONENTIAL, a, p) for a in (0.25, 1.0) for p in (1.0, 2.0)]
    out += [Weight(weights.MITTAG_LEFFLER, a, p) for a in (0.25, 1.0) for p in (1.0, 1.5)]
    return tuple(out)


def run_validate_weights(cfg: RunConfig) -> Outcome:
    out = Outcome()
    ws = cfg.weights.all_weights(cfg.params) or default_weight_matrix()
    sample = _weight_sample(cfg, _rng(cfg))
    out.header = ["weight", "P1", "P2", "P3", "P4", "c2", "P2_C", "P3_C", "P3_D", "P4_C"]
    for w in ws:
        partners = [(a, w.p) for a in (0.25 * w.alpha, 0.5 * w.alpha, w.alpha)]
        rep = weights.validate_P1_P4(w, partners, sample)
        c = rep.constants
        out.rows.append([w.label()] + ["pass" if rep.passed[k] else "fail" for k in ("P1", "P2", "P3", "P4")]
                        + [c["c2"], c["P2_C"], c["P3_C"], c["P3_D"], c["P4_C"]])
        out.report.append(rep.summary())
        out.check(f"P1-P4 {w.label()}", rep.ok, "; ".join(rep.violations))
        if w.family == weights.EXPONENTIAL:
            out.check(f"c2 = 2^p {w.label()}", c["c2"] == 2.0 ** w.p, f"c2 = {c['c2']}")
    for fam, p, (a1, a2, a3) in cfg.weights.cascades(cfg.params):
        out.report.append(f"cascade {fam} p={p:g}: alpha1={a1:.6g} alpha2={a2:.6g} alpha3={a3:.6g}")
    lo, hi = weights.ml_exp_equivalence(1.0, 1.0)
    out.report.append(f"E_2(x^2) / exp(x) on [0, 20] lies in [{lo:.6g}, {hi:.6g}]")
    out.check("ML/exp equivalence bounds", 0.0 < lo <= hi < math.inf, f"[{lo}, {hi}]")
    return out


def _kernel_pairs(cfg: RunConfig, rng) -> list:
    g = cfg.grid()
    d = g.d
    pairs = []
    while len(pairs) < cfg.quad.kernel_pairs:
        v = rng.uniform(-4.0, 4.0, size=d)
        vp = rng.uniform(-6.0, 6.0, size=d)
        if np.linalg.norm(v) <= 4.0 and np.linalg.norm(vp) <= 6.0 and np.linalg.norm(vp - v) > g.h:
            pairs.append((v, vp))
    return pairs


def kernel_equivalence(f: Distribution, params: CollisionParams, pairs, quad: HyperplaneQuad) -> np.ndarray:
    """kf_hyperplane / kf_equivalent at each pair."""
    return np.array([carleman.kf_hyperplane(f, v, vp, params, quad) / carleman.kf_equivalent(f, v, vp, params, quad)
                     for v, vp in pairs])


def run_validate_kernel(cfg: RunConfig) -> Outcome:
    out = Outcome()
    p = cfg.params
    g = cfg.grid()
    f = cfg.initial.build(g)
    tp, tm = kernel.tau_relation(p)
    out.report.append(f"sin-theta exponents: grazing {tp:g}, head-on {tm:g}")
    conv = kernel.integrability_probe(p, p.nu + 0.5)
    div = kernel.integrability_probe(p, max(p.nu - 0.25, 0.0))
    out.report.append(f"angular moment with beta = nu + 1/2 settles at {conv[-1]:.6g}")
    out.report.append(f"angular moment with beta = nu - 1/4 reaches {div[-1]:.6g} (growing)")
    out.check("angular singularity integrable only beyond nu",
              abs(conv[-1] - conv[-2]) < 1e-6 * abs(conv[-1]) and div[-1] > 2.0 * div[-11])
    pairs = _kernel_pairs(cfg, _rng(cfg))
    quad = cfg.quad.hyperplane()
    fine = replace(quad, n_radial=2 * quad.n_radial)
    base = kernel_equivalence(f, p, pairs, quad)
    refined = kernel_equivalence(f, p, pairs, fine)
    out.header = [f"v_{k}" for k in range(p.d)] + [f"vp_{k}" for k in range(p.d)] + ["ratio", "ratio_refined"]
    for (v, vp), r0, r1 in zip(pairs, base, refined):
        out.rows.append([*v, *vp, r0, r1])
    c1, c2 = float(base.min()), float(base.max())
    f1, f2 = float(refined.min()), float(refined.max())
    out.report.append(f"kernel ratio over {len(pairs)} pairs in [{c1:.6g}, {c2:.6g}], spread {c2 / c1:.4g}")
    out.report.append(f"refined quadrature: [{f1:.6g}, {f2:.6g}]")
    out.check("kernel ratio spread below 50", c1 > 0.0 and c2 / c1 < 50.0, f"{c2 / c1:.4g}")
    drift = max(abs(f1 / c1 - 1.0), abs(f2 / c2 - 1.0))
    out.check("kernel ratio interval stable under refinement", drift <= 0.2, f"relative change {drift:.3g}")
    for d in (2, 3):
        consts = [carleman.change_of_vars_check(tf, d)[2] for tf in _cov_test_functions()]
        exact = carleman.change_of_vars_constant(d)
        out.report.append(f"change of variables d={d}: " + ", ".join(f"{c:.6f}" for c in consts)
                          + f" (closed form {exact:.6f})")
        spread = (max(consts) - min(consts)) / abs(np.mean(consts))
        if d == 2:
            out.check("change of variables d=2", all(abs(c - 2.0) <= 5e-3 for c in consts), str(consts))
        else:
            out.check("change of variables d=3 consistent", spread <= 1e-2, f"spread {spread:.3g}")
    return out


def _cov_test_functions():
    def gauss(y):
        return np.exp(-np.sum(y * y, axis=-1))

    def bump(y):
        r2 = np.sum(y * y, axis=-1)
        return np.where(r2 < 1.0, (1.0 - r2) ** 3, 0.0)

    def shifted(y):
        z = y - 0.5
        return np.sum(y * y, axis=-1) * np.exp(-np.sum(z * z, axis=-1))

    return gauss, bump, shifted


def run_carleman_check(cfg: RunConfig) -> Outcome:
    out = Outcome()
    if cfg.params.d != 2:
        raise ConfigError("carleman-check is implemented for d = 2")
    f = cfg.initial.build(cfg.grid())
    quad = cfg.quad.identity()
    out.header = ["level", "lhs", "rhs", "relerr"]
    errs = []
    for level, q in (("production", quad), ("refined", quad.refined())):
        lhs, rhs, err = carleman.carleman_identity_check(f, carleman.gaussian_test_function, cfg.params, quad=q)
        out.rows.append([level, lhs, rhs, err])
        out.report.append(f"{level}: lhs {lhs:.8g} rhs {rhs:.8g} relerr {err:.3e}")
        errs.append(err)
    out.check("identity relerr below 2e-2", errs[0] < 2e-2, f"{errs[0]:.3e}")
    out.check("identity relerr decreases under refinement", errs[1] < errs[0], f"{errs[0]:.3e} -> {errs[1]:.3e}")
    return out


def _apex_bumps(v):
    """Anisotropic Gaussians peaking at 1 on the cone apex, one per orientation."""
    d = len(v)
    out = []
    for axis in range(min(d, 2)):
        inv_var = np.full(d, 2.0)
        inv_var[axis] = 0.5

        def bump(x, inv_var=inv_var):
            z = x - v
            return np.exp(-0.5 * np.sum(z * z * inv_var, axis=-1))

        out.append(bump)
    return out


def run_cone_check(cfg: RunConfig) -> Outcome:
    out = Outcome()
    p = cfg.params
    g = cfg.grid()
    f = cfg.initial.build(g)
    bounds = StatsBounds.from_distribution(f)
    ls = grid.level_set_constants(f, bounds)
    out.report.append(f"level set: r={ls.r:.6g} l={ls.l:.6g} m={ls.m:.6g} measured={ls.measured:.6g}")
    out.header = ["speed", "cone_measure", "symmetric", "max_sigma_dot_v", "lambda", "lambda_max",
                  "integral_ratio", "proof_constant"]
    sigma_dot = []
    ratios = []
    quad = cfg.quad.hyperplane()
    for speed in cfg.cone_speeds:
        v = np.zeros(p.d)
        v[0] = speed
        cone = carleman.cone_set(f, v, ls, sphere_nodes=cfg.quad.sphere_nodes)
        half = cfg.quad.sphere_nodes // 2
        symmetric = bool(np.array_equal(cone.member, np.roll(cone.member, half)))
        if not len(cone.directions):
            out.check(f"A(v) nonempty at |v|={speed:g}", False)
            continue
        dots = float(np.abs(cone.directions @ v).max())
        sigma_dot.append(dots)
        kb = carleman.cone_kf_lower_bound_check(f, v, cone, p, quad, n_samples=cfg.quad.cone_samples)
        reps = [carleman.cone_integral_lower_bound_check(bump, v, 1.0, cone, p.nu, exclusion=1e-3, outer_radius=40.0)
                for bump in _apex_bumps(v)]
        low = min(r.ratio for r in reps)
        ratios.append(low)
        out.rows.append([_num(speed), cone.measure, "yes" if symmetric else "no", dots, kb.lam, kb.lam_max,
                         low, reps[0].proof_constant])
        out.report.append(f"|v|={speed:g}: |A|={cone.measure:.6g} lambda={kb.lam:.6g} "
                          + "ratios " + ", ".join(f"{r.ratio:.6g}" for r in reps))
        out.check(f"A(v) nonempty and symmetric at |v|={speed:g}", symmetric and cone.measure > 0.0)
        out.check(f"kernel lower bound positive at |v|={speed:g}", kb.ok, f"lambda {kb.lam:.3g}")
        out.check(f"cone-integral bound at |v|={speed:g}", all(r.holds for r in reps), f"ratio {low:.4g}")
    if sigma_dot:
        out.report.append(f"max |sigma . v| over all cones {max(sigma_dot):.6g} (level-set radius {ls.r:.6g})")
        out.check("|sigma . v| bounded by the level-set radius", max(sigma_dot) <= ls.r, f"{max(sigma_dot):.4g}")
    if ratios:
        out.report.append(f"smallest cone-integral ratio {min(ratios):.6g}")
    # indicator of a ball about the apex: the bound is attained in closed form
    full = replace(cone, member=np.ones_like(cone.member), directions=cone.nodes,
                   measure=cone.node_weight * len(cone.nodes))
    ind = carleman.cone_integral_lower_bound_check(
        lambda x: np.where(np.sum((x - full.v) ** 2, axis=-1) <= 1.0, 1.0, 0.0),
        full.v, 1.0, full, p.nu, outer_radius=50.0, breaks=[1.0])
    exact = full.measure / p.nu
    rel = abs(ind.lhs - exact) / exact
    out.report.append(f"indicator case: {ind.lhs:.10g} vs closed form {exact:.10g}")
    out.check("indicator equality case", rel < 1e-3, f"relative error {rel:.3g}")
    return out


def _operator(cfg: RunConfig, g: Grid):
    q = cfg.quad
    return GridCollisionOperator(g, cfg.params, theta_min=q.operator_theta_min, order=q.operator_order,
                                 pair_tolerance=q.pair_tolerance)


def _simulate(cfg: RunConfig, keep_snapshots: bool = False):
    g = cfg.grid()
    f0 = cfg.initial.build(g)
    tracked = cfg.weights.all_weights(cfg.params)
    sim = replace(cfg.sim, weights_tracked=tracked, keep_snapshots=keep_snapshots or cfg.sim.keep_snapshots)
    op = _operator(cfg, g)
    series = dynamics.simulate(f0, sim, op, cfg.params.gamma)
    return f0, series, op


def simulation_checks(series, out: Outcome, cfg: RunConfig) -> None:
    m = series.column("mass")
    e = series.column("energy")
    mom = np.asarray(series.momentum)
    H = series.column("entropy")
    dm = float(np.abs(m / m[0] - 1.0).max())
    de = float(np.abs(e / e[0] - 1.0).max())
    dp = np.abs(mom - mom[0]).max(axis=0) / m[0]
    rise = float(np.diff(H).max()) if H.size > 1 else 0.0
    out.report.append(f"mass drift {dm:.3e}, energy drift {de:.3e}, momentum drift "
                      + ", ".join(f"{x:.3e}" for x in dp))
    out.report.append(f"entropy {H[0]:.8g} -> {H[-1]:.8g}, largest increase {rise:.3e}")
    out.report.append(f"clipped mass total {sum(series.clipped):.3e}")
    out.check("mass conserved", dm < 1e-3, f"{dm:.3e}")
    out.check("energy conserved", de < 1e-3, f"{de:.3e}")
    for k, x in enumerate(dp):
        out.check(f"momentum_{k} conserved", x < 1e-3, f"{x:.3e}")
    out.check("entropy nonincreasing", rise <= 1e-4, f"largest increase {rise:.3e}")
    gen = dynamics.moment_generation_check(series, cfg.sim.generation_alpha, cfg.params.gamma)
    out.report.append(f"generated exponential moment: sup {gen.bound:.8g}, initial {gen.initial:.8g}, "
                      f"ratio {gen.ratio_to_initial:.6g}")
    out.check("exponential moment generated and bounded", gen.passed, f"ratio {gen.ratio_to_initial:.4g}")


def _table(series) -> tuple:
    return series.header(), [list(r) for r in series.rows()]


def run_simulate(cfg: RunConfig) -> Outcome:
    out = Outcome()
    f0, series, _ = _simulate(cfg)
    out.header, out.rows = _table(series)
    simulation_checks(series, out, cfg)
    if cfg.dump_distributions:
        out.dumps["initial.btgrid"] = f0
    return out


def propagation_order_limit(params: CollisionParams) -> float:
    """Orders p below this value are covered by the tail-propagation result."""
    return 4.0 / (params.nu + 2.0)


def envelope_analysis(series, cfg: RunConfig, out: Outcome, f0: Distribution | None = None) -> None:
    """Fitted envelopes on every tracked weight and the alpha2 / alpha1 norm ratio per cascade.

    Weights of order p >= 4 / (nu + 2) are reported but not asserted.
    """
    p = cfg.params
    limit = propagation_order_limit(p)
    labels = list(series.labels)
    tracked = cfg.weights.all_weights(p)
    for k, lab in enumerate(labels):
        if cfg.sim.envelope == "fit":
            a, b = dynamics.fit_envelope(series, k, p.d, p.nu)
            held = dynamics.holdout_times(series)
        else:
            a, b = cfg.sim.envelope
            held = None
        rep = dynamics.envelope_check(series, k, a, b, p.d, p.nu, times=held)
        covered = tracked[k].p < limit
        window = "holdout" if held is not None else "recorded"
        out.report.append(f"envelope {lab}: a={a:.6g} b={b:.6g} min slack {rep.min_slack:.4g} "
                          f"over {rep.checked} {window} times"
                          + ("" if covered else f" (p >= {limit:.4g}, not asserted)"))
        if covered:
            out.check(f"envelope {lab} on {window} times", rep.passed,
                      "" if rep.passed else f"first violation at t={rep.first_violation:g}")
    if f0 is not None:
        for order in cfg.weights.cascade_orders:
            decay = cfg.weights.alpha0 * weights.bracket(f0.grid.points()) ** order
            c0 = float(np.max(f0.values * np.exp(decay)))
            out.report.append(f"initial datum: f0 <= {c0:.6g} exp(-{cfg.weights.alpha0:g} <v>^{order:g})")
    for fam, order, (a1, a2, _) in cfg.weights.cascades(p):
        i2 = labels.index(Weight(fam, a2, order).label())
        i1 = labels.index(Weight(fam, a1, order).label())
        c = float(series.weight_series(i2).max() / series.l1_series(i1).max())
        out.report.append(f"sup m_(alpha2) <= c sup ||f w_(alpha1)||_1 for {fam} p={order:g} with c = {c:.6g}")
        out.check(f"norm chain constant finite {fam} p={order:g}", math.isfinite(c) and c > 0.0, f"c = {c}")


def q11_events(series, cfg: RunConfig) -> list:
    """(t, label, q11) at the f w argmax of every recorded snapshot, for each alpha2 weight."""
    g = cfg.grid()
    p = cfg.params
    quads = cfg.quad.collision()
    events = []
    for fam, order, (a1, a2, _) in cfg.weights.cascades(p):
        w = Weight(fam, a2, order)
        split = replace(cfg.split, weight=w)
        for t, vals in series.snapshots:
            f = Distribution(g, vals)
            _, node = grid.weighted_sup(f, w)
            events.append((t, w.label(), collision.q11(f, node, split, p, quads)))
    return events


def run_envelope_report(cfg: RunConfig) -> Outcome:
    out = Outcome()
    f0, series, _ = _simulate(cfg, keep_snapshots=True)
    out.header, out.rows = _table(series)
    simulation_checks(series, out, cfg)
    envelope_analysis(series, cfg, out, f0)
    events = q11_events(series, cfg)
    worst = max((q for _, _, q in events), default=-math.inf)
    out.report.append(f"q11 at the weighted argmax: {len(events)} events, largest {worst:.6g}")
    out.check("q11 <= 0 at every weighted argmax", worst <= 0.0, f"largest {worst:.4g}")
    if cfg.dump_distributions and series.snapshots:
        out.dumps["final.btgrid"] = Distribution(cfg.grid(), series.snapshots[-1][1])
    return out


PIPELINES = {
    "simulate": run_simulate,
    "validate-weights": run_validate_weights,
    "validate-kernel": run_validate_kernel,
    "carleman-check": run_carleman_check,
    "cone-check": run_cone_check,
    "envelope-report": run_envelope_report,
}


def write_outputs(cfg: RunConfig, out: Outcome, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(out.header)
        for row in out.rows:
            w.writerow([_fmt(x) for x in row])
    lines = [f"command: {cfg.command}", f"config: {cfg.name}", f"seed: {cfg.seed}", ""]
    lines += out.report
    lines.append("")
    lines += [f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else "")
              for name, (ok, detail) in out.checks.items()]
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    (out_dir / "config.ini").write_text(serialize(cfg))
    for name, dist in out.dumps.items():
        grid.save_distribution(dist, out_dir / name)


def run(cfg: RunConfig, out_dir) -> Outcome:
    """Execute the configured command and write its files into out_dir."""
    out = PIPELINES[cfg.command](cfg)
    write_outputs(cfg, out, Path(out_dir))
    return out


def resolve_out_dir(cli_value: str | None) -> Path:
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="noncutoff", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="path to a run configuration file")
    src.add_argument("--preset", help=f"built-in configuration: {', '.join(PRESET_NAMES)}")
    ap.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    ap.add_argument("--seed", type=int, help="seed for sampled checks")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else preset(args.preset)
        cfg = replace(cfg, command=args.command)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    out_dir = resolve_out_dir(args.out)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            out = run(cfg, out_dir)
    except dynamics.InstabilityError as exc:
        print(json.dumps({"error": "instability", "message": str(exc), "time": exc.time}), file=sys.stderr)
        return 1
    except ValueError as exc:
        # settings that parse but cannot be run, e.g. too few records for an envelope fit
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    print((out_dir / "report.txt").read_text(), end="")
    if out.failures:
        print(json.dumps({"failures": out.failures}, indent=1), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
