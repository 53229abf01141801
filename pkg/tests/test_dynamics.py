import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noncutoff.collision import GridCollisionOperator
from noncutoff.dynamics import (EULER, RK4, DiagnosticSeries, InstabilityError, SimConfig, envelope_check,
                                fit_envelope, holdout_times, moment_generation_check, simulate, stability_number,
                                step, write_csv)
from noncutoff.grid import Distribution, Grid, mass, maxwellian
from noncutoff.kernel import CollisionParams
from noncutoff.weights import EXPONENTIAL, MITTAG_LEFFLER, Weight

P = CollisionParams()


def synthetic(times, values):
    """Series carrying a single tracked weight with the given sup-norm values."""
    s = DiagnosticSeries(labels=("w",))
    for t, m in zip(times, values):
        s.times.append(float(t))
        s.m_w.append([float(m)])
    return s


@pytest.fixture(scope="module")
def op():
    return GridCollisionOperator(Grid(2, 24, 8.0), P)


@pytest.fixture(scope="module")
def bimodal24(op):
    g = op.grid
    return Distribution(g, maxwellian(g, rho=0.5, u=[2, 0], T=0.5).values
                        + maxwellian(g, rho=0.5, u=[-2, 0], T=0.5).values)


# --- configuration ------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(T_final=-1.0), dict(method="leapfrog"), dict(record_every=0),
                                dict(envelope=(0.0, 1.0)), dict(envelope=(1.0, -1.0))])
def test_sim_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_step_count():
    assert SimConfig(T_final=1.0, dt=2e-3).n_steps == 500


# --- envelope -------------------------------------------------------------------------

def test_envelope_constant_series_passes_with_half_slack():
    a, b = 4.0, 0.7
    rep = envelope_check(synthetic(np.linspace(0, 1, 11), [a / 2] * 11), 0, a, b, 2, 0.5)
    assert rep.passed and rep.first_violation is None
    assert rep.min_slack >= a / 2
    assert rep.checked == 10          # t = 0 is excluded


def test_envelope_constructed_violation():
    a, b = 1.0, 0.5
    t = np.linspace(0, 1, 11)
    with np.errstate(divide="ignore"):
        m = a + 2 * b * t ** -4.0
    rep = envelope_check(synthetic(t, m), 0, a, b, 2, 0.5)
    assert not rep.passed
    assert rep.first_violation == pytest.approx(0.1)


def test_envelope_restricted_times():
    t = np.linspace(0, 1, 11)
    m = np.where(t < 0.5, 100.0, 1.0)
    rep = envelope_check(synthetic(t, m), 0, 2.0, 0.0, 2, 0.5, times=t[t >= 0.5])
    assert rep.passed and rep.checked == 6


def test_fit_constant_series():
    a, b = fit_envelope(synthetic(np.linspace(0, 1, 21), [5.0] * 21), 0, 2, 0.5)
    assert a == pytest.approx(5.5, rel=1e-9)
    assert b == pytest.approx(0.0, abs=1e-9)


def test_fit_exact_envelope_shape():
    t = np.linspace(0, 1, 41)
    with np.errstate(divide="ignore"):
        m = 1.0 + t ** -4.0
    a, b = fit_envelope(synthetic(t, m), 0, 2, 0.5)
    assert a == pytest.approx(1.1, rel=1e-6)
    assert b == pytest.approx(1.1, rel=1e-6)


def test_fit_needs_eight_points():
    with pytest.raises(ValueError):
        fit_envelope(synthetic(np.linspace(0, 1, 8), [1.0] * 8), 0, 2, 0.5)


@settings(max_examples=30, deadline=None)
@given(start=st.floats(1.0, 50.0), rate=st.floats(0.1, 20.0), floor=st.floats(0.1, 5.0))
def test_fit_covers_its_window_for_decreasing_series(start, rate, floor):
    t = np.linspace(0, 1, 25)
    m = floor + start * np.exp(-rate * t)
    s = synthetic(t, m)
    a, b = fit_envelope(s, 0, 2, 0.5)
    fit_window = t[t > 0][: (t.size - 1) // 2]
    assert envelope_check(s, 0, a, b, 2, 0.5, times=fit_window).passed
    # a decreasing series stays under the envelope on the later half too
    assert envelope_check(s, 0, a, b, 2, 0.5, times=holdout_times(s)).passed


def test_holdout_is_second_half():
    s = synthetic(np.linspace(0, 1, 21), [1.0] * 21)
    assert holdout_times(s).tolist() == pytest.approx(np.linspace(0.55, 1.0, 10).tolist())


# --- generation -----------------------------------------------------------------------

def test_generation_report():
    s = DiagnosticSeries(exp_moment_gamma=[1.0, 1.2, 1.5])
    rep = moment_generation_check(s, 0.05, 1.0)
    assert rep.bound == 1.5 and rep.ratio_to_initial == 1.5 and rep.passed
    assert not moment_generation_check(DiagnosticSeries(exp_moment_gamma=[1.0, 2.5]), 0.05, 1.0).passed


# --- stepping ---------------------------------------------------------------------------

def test_zero_step_is_identity(bimodal24, op):
    f, lost = step(bimodal24, 0.0, op)
    assert f is bimodal24 and lost == 0.0


def test_negative_step_rejected(bimodal24, op):
    with pytest.raises(ValueError):
        step(bimodal24, -1e-3, op)


@pytest.mark.parametrize("method", [EULER, RK4])
def test_maxwellian_is_nearly_fixed(op, method):
    m = maxwellian(op.grid)
    dt = 1e-2
    f, _ = step(m, dt, op, method)
    residual = np.max(np.abs(op(m.values)))
    assert np.max(np.abs(f.values - m.values)) <= 1.01 * residual * dt
    assert residual < 0.1 * np.max(m.values)


def test_rk4_step_halving_order(bimodal24, op):
    def gap(dt):
        one, _ = step(bimodal24, dt, op, RK4)
        half, _ = step(bimodal24, dt / 2, op, RK4)
        two, _ = step(half, dt / 2, op, RK4)
        return np.max(np.abs(one.values - two.values))

    ratio = gap(2e-2) / gap(1e-2)
    assert 16.0 <= ratio <= 40.0


def test_step_conserves_to_rounding(bimodal24, op):
    f, lost = step(bimodal24, 2e-3, op)
    # the only mass change is what clipping removes in the far tail
    assert lost < 1e-9 * mass(bimodal24)
    assert mass(f) + lost == pytest.approx(mass(bimodal24), rel=1e-9)


def test_instability_aborts_with_time(bimodal24, op):
    with pytest.raises(InstabilityError) as err:
        step(bimodal24, 5.0, op, EULER, time=0.25)
    assert err.value.time == 0.25


def test_simulate_rejects_large_dt(bimodal24, op):
    assert stability_number(bimodal24, 1.0, op) > 0.2
    with pytest.raises(ValueError, match="dt too large"):
        simulate(bimodal24, SimConfig(T_final=1.0, dt=1.0), op, P.gamma)


# --- simulation ---------------------------------------------------------------------------

def test_maxwellian_series_is_flat(op):
    m = maxwellian(op.grid)
    series = simulate(m, SimConfig(T_final=0.1, dt=5e-3, record_every=4, weights_tracked=(Weight(EXPONENTIAL, 0.1, 2.0),)),
                      op, P.gamma)
    for col in ("mass", "energy"):
        v = series.column(col)
        assert np.max(np.abs(v - v[0])) < 1e-6 * abs(v[0])
    e = series.column("entropy")
    assert np.max(np.abs(e - e[0])) < 1e-3
    sup = series.weight_series(0)
    assert np.max(np.abs(sup / sup[0] - 1)) < 1e-2


@pytest.fixture(scope="module")
def short_run(bimodal24, op):
    sim = SimConfig(T_final=0.2, dt=4e-3, record_every=5, keep_snapshots=True,
                    weights_tracked=(Weight(EXPONENTIAL, 0.2, 1.0), Weight(MITTAG_LEFFLER, 0.2, 1.0)))
    return simulate(bimodal24, sim, op, P.gamma)


def test_short_run_conserves_and_dissipates(short_run):
    m = short_run.column("mass")
    e = short_run.column("energy")
    p = np.asarray(short_run.momentum)
    assert np.max(np.abs(m / m[0] - 1)) < 1e-3
    assert np.max(np.abs(e / e[0] - 1)) < 1e-3
    assert np.max(np.abs(p - p[0])) / m[0] < 1e-3
    assert np.max(np.diff(short_run.column("entropy"))) <= 1e-4


def test_short_run_records(short_run):
    t = np.asarray(short_run.times)
    assert t[0] == 0.0 and t[-1] == pytest.approx(0.2)
    assert np.all(np.diff(t) > 0)
    assert len(short_run.snapshots) == t.size
    assert np.all(np.isfinite(short_run.weight_series(1)))
    gen = moment_generation_check(short_run, 0.05, 1.0)
    assert gen.passed and gen.bound >= gen.initial


def test_generation_weight_starts_at_mass(short_run):
    assert short_run.exp_moment_gamma[0] == pytest.approx(short_run.mass[0], rel=1e-12)


def test_csv_format(short_run, tmp_path):
    path = tmp_path / "d.csv"
    write_csv(short_run, path)
    rows = list(csv.reader(path.open()))
    assert rows[0][:6] == ["t", "mass", "momentum_0", "momentum_1", "energy", "entropy"]
    assert rows[0][-2:] == ["exp_moment_gamma", "clipped_mass"]
    assert "sup_exp_a0.2_p1" in rows[0] and "l1_ml_a0.2_p1" in rows[0]
    assert len(rows) == len(short_run.times) + 1
    mantissa = rows[1][1].split("e")[0]
    assert len(mantissa.replace("-", "").replace(".", "")) == 12


def test_series_validation():
    s = synthetic([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        s.validate()
