import csv
import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noncutoff import cli
from noncutoff.cli import (COMMANDS, PRESET_NAMES, ConfigError, InitialData, QuadSettings, RunConfig, WeightSet, main,
                           parse, preset, resolve_out_dir, serialize)
from noncutoff.collision import SplitConfig
from noncutoff.dynamics import SimConfig
from noncutoff.grid import load_distribution, mass
from noncutoff.kernel import CollisionParams
from noncutoff.weights import EXPONENTIAL, MITTAG_LEFFLER, Weight

SMALL_SIM = """
[grid]
N = 24
[sim]
T_final = 0.08
dt = 0.004
record_every = 1
[weights]
cascade_families = exponential
cascade_orders = 1.0
[quadrature]
kernel_pairs = 40
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# --- presets ---------------------------------------------------------------------------

def test_maxwellian_preset_constants():
    cfg = preset("maxwellian-2d")
    assert (cfg.params.d, cfg.N, cfg.L) == (2, 48, 8.0)
    assert (cfg.params.gamma, cfg.params.nu) == (1.0, 0.5)
    assert (cfg.sim.method, cfg.sim.dt) == ("rk4", 2e-3)


def test_bimodal_preset_constants():
    cfg = preset("bimodal-2d")
    assert cfg.initial.centers == ((2.0, 0.0), (-2.0, 0.0))
    assert cfg.initial.temperature == 0.5


def test_unknown_preset_lists_valid_names():
    with pytest.raises(ConfigError) as err:
        preset("unknown")
    for name in PRESET_NAMES:
        assert name in str(err.value)


def test_every_preset_is_valid():
    assert set(PRESET_NAMES) == {"maxwellian-2d", "bimodal-2d", "shifted-bump-2d", "cone-2d", "ml-weights"}
    for name in PRESET_NAMES:
        cfg = preset(name)
        assert cfg.command in COMMANDS and cfg.name == name


def test_propagation_presets_respect_order_limit():
    limit = cli.propagation_order_limit(CollisionParams())
    assert limit == pytest.approx(1.6)
    for name in ("bimodal-2d", "shifted-bump-2d", "ml-weights"):
        assert all(p < limit for p in preset(name).weights.cascade_orders)


def test_initial_data_masses():
    g = RunConfig().grid()
    f = InitialData(centers=((1.0, 0.0), (-1.0, 0.0), (0.0, 2.0)), temperature=0.6, mass=2.0).build(g)
    assert mass(f) == pytest.approx(2.0, rel=1e-6)


def test_cascade_weights():
    ws = WeightSet(tracked=(Weight(EXPONENTIAL, 0.3, 1.0),), cascade_families=(EXPONENTIAL, MITTAG_LEFFLER),
                   cascade_orders=(1.0,))
    params = CollisionParams()
    casc = ws.cascades(params)
    assert len(casc) == 2
    for _, _, (a1, a2, a3) in casc:
        assert a1 == pytest.approx(0.25)
        assert a2 + 2.0 * a3 < a1
    assert len(ws.all_weights(params)) == 5


# --- config text ---------------------------------------------------------------------------

def rich_config():
    return RunConfig(
        command="envelope-report", name="rich", seed=17,
        params=CollisionParams(d=2, gamma=0.75, nu=0.3, c_pos=1.5, c_neg=0.25),
        N=32, L=7.5, initial=InitialData(centers=((0.1, 0.2), (-1.0 / 3.0, 2.0)), temperature=0.7, mass=1.3),
        weights=WeightSet(tracked=(Weight(EXPONENTIAL, 0.1, 2.0), Weight(MITTAG_LEFFLER, 0.5, 1.5)), alpha0=0.4,
                          cascade_families=(MITTAG_LEFFLER,), cascade_orders=(1.0, 1.5), safety=0.8),
        sim=SimConfig(T_final=0.5, dt=1e-3, method="euler", record_every=3, envelope=(2.0, 0.5)),
        split=SplitConfig(exclusion_radius=0.3, q2_mode="convolution", conv_constant=35.0),
        quad=QuadSettings(n_radial=512, kernel_pairs=100), cone_speeds=(0.0, 3.0), dump_distributions=False,
    )


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_round_trip_presets(name):
    cfg = preset(name)
    assert parse(serialize(cfg)) == cfg
    assert serialize(parse(serialize(cfg))) == serialize(cfg)


def test_round_trip_rich_config():
    cfg = rich_config()
    assert parse(serialize(cfg)) == cfg


@settings(max_examples=25, deadline=None)
@given(gamma=st.floats(0.01, 1.0), nu=st.floats(0.01, 1.0), T=st.floats(0.1, 3.0), seed=st.integers(0, 2 ** 31),
       dt=st.floats(1e-5, 1e-1), x=st.floats(-3, 3))
def test_round_trip_property(gamma, nu, T, seed, dt, x):
    cfg = replace(rich_config(), params=CollisionParams(gamma=gamma, nu=nu), seed=seed,
                  initial=InitialData(centers=((x, -x),), temperature=T), sim=replace(SimConfig(), dt=dt))
    assert parse(serialize(cfg)) == cfg


def test_missing_keys_inherit_from_preset():
    cfg = parse("[run]\npreset = bimodal-2d\n[grid]\nN = 32\n")
    assert cfg.N == 32
    assert cfg.initial == preset("bimodal-2d").initial


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="nu <= 1"):
        parse("[collision]\nnu = 1.5\n")
    with pytest.raises(ConfigError, match="unknown config sections"):
        parse("[extras]\nx = 1\n")
    with pytest.raises(ConfigError, match="family:alpha:p"):
        parse("[weights]\ntracked = exp:0.5\n")
    with pytest.raises(ConfigError, match="boolean"):
        parse("[run]\ndump_distributions = maybe\n")
    with pytest.raises(ConfigError):
        parse("[run]\ncommand = plot\n")
    with pytest.raises(ConfigError):
        parse("not a config")


def test_tracked_weights_must_not_sit_in_sim():
    with pytest.raises(ValueError):
        RunConfig(sim=SimConfig(weights_tracked=(Weight(EXPONENTIAL, 0.1, 1.0),)))


# --- output directory --------------------------------------------------------------------------

def test_out_dir_resolution(monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    assert str(resolve_out_dir(None)) == cli.DEFAULT_OUT
    monkeypatch.setenv(cli.OUT_ENV, "/tmp/envdir")
    assert str(resolve_out_dir(None)) == "/tmp/envdir"
    assert str(resolve_out_dir("/tmp/flag")) == "/tmp/flag"


# --- commands --------------------------------------------------------------------------------

def test_malformed_config_exit_code(tmp_path, capsys):
    code = main(["validate-weights", "--config", write(tmp_path, "[collision]\nnu = 1.5\n"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert "nu <= 1" in err["message"]


def test_missing_config_file(tmp_path, capsys):
    assert main(["validate-weights", "--config", str(tmp_path / "absent.ini")]) == 2


def test_unknown_preset_exit_code(tmp_path, capsys):
    assert main(["simulate", "--preset", "nope", "--out", str(tmp_path)]) == 2
    assert "maxwellian-2d" in capsys.readouterr().err


def test_validate_weights_default_matrix(tmp_path, capsys):
    out = tmp_path / "w"
    assert main(["validate-weights", "--preset", "maxwellian-2d", "--out", str(out)]) == 0
    report = (out / "report.txt").read_text()
    for prop in ("P1", "P2", "P3", "P4"):
        assert prop in report
    assert "FAIL" not in report
    assert (out / "diagnostics.csv").exists() and (out / "config.ini").exists()


def test_carleman_check(tmp_path, capsys):
    out = tmp_path / "c"
    assert main(["carleman-check", "--preset", "maxwellian-2d", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "diagnostics.csv").open()))
    assert len(rows) == 2
    errs = [float(r["relerr"]) for r in rows]
    assert errs[0] < 2e-2 and errs[1] < errs[0]


def test_cone_check(tmp_path, capsys):
    out = tmp_path / "k"
    cfg = write(tmp_path, "[run]\npreset = cone-2d\n[quadrature]\ncone_samples = 16\n")
    assert main(["cone-check", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "diagnostics.csv").open()))
    assert len(rows) == 4


def test_validate_kernel_small(tmp_path, capsys):
    out = tmp_path / "v"
    cfg = write(tmp_path, "[grid]\nN = 32\n[quadrature]\nkernel_pairs = 30\n")
    assert main(["validate-kernel", "--config", cfg, "--out", str(out)]) == 0
    assert "change of variables" in (out / "report.txt").read_text()


def test_simulate_writes_series_and_dumps(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["simulate", "--config", write(tmp_path, SMALL_SIM), "--out", str(out)]) == 0
    rows = list(csv.reader((out / "diagnostics.csv").open()))
    assert rows[0][0] == "t" and len(rows) == 22
    f0 = load_distribution(out / "initial.btgrid")
    assert f0.grid.N == 24
    reread = cli.load_config(out / "config.ini")
    assert reread.N == 24 and reread.sim.dt == 0.004


def test_simulate_is_deterministic(tmp_path, capsys):
    texts = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["simulate", "--config", write(tmp_path, SMALL_SIM), "--out", str(out), "--seed", "3"]) == 0
        texts.append((out / "diagnostics.csv").read_bytes())
    assert texts[0] == texts[1]


def test_seed_changes_sampled_checks_only(tmp_path, capsys):
    cfg = write(tmp_path, "[grid]\nN = 32\n[quadrature]\nkernel_pairs = 20\n")
    reports = []
    for seed in ("1", "1", "2"):
        out = tmp_path / f"k{len(reports)}"
        main(["validate-kernel", "--config", cfg, "--out", str(out), "--seed", seed])
        reports.append((out / "diagnostics.csv").read_bytes())
    assert reports[0] == reports[1]
    assert reports[0] != reports[2]


def test_envelope_report_small(tmp_path, capsys):
    out = tmp_path / "e"
    text = SMALL_SIM.replace("cascade_families = exponential", "cascade_families = exponential, mittag-leffler")
    assert main(["envelope-report", "--config", write(tmp_path, text), "--out", str(out)]) == 0
    report = (out / "report.txt").read_text()
    assert "holdout" in report
    assert "final.btgrid" in {p.name for p in out.iterdir()}


def test_failed_check_exit_code(tmp_path, capsys):
    # an envelope far below the data must fail the holdout check
    cfg = parse(SMALL_SIM)
    cfg = replace(cfg, sim=replace(cfg.sim, envelope=(1e-9, 0.0)))
    path = write(tmp_path, serialize(cfg))
    assert main(["envelope-report", "--config", path, "--out", str(tmp_path / "x")]) == 1
    failures = json.loads(capsys.readouterr().err)["failures"]
    assert any("envelope" in f["check"] for f in failures)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "noncutoff", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "validate-weights" in res.stdout


def test_outcome_failures():
    out = cli.Outcome()
    out.check("a", True)
    out.check("b", np.False_, "why")
    assert out.failures == [{"check": "b", "detail": "why"}]
