import hashlib
import json
import math

import numpy as np
import pytest

from spinnet import cli, metrology
from spinnet import io as sio
from spinnet.errors import ExportError, InvalidConfigError
from spinnet.harness import RunReport, ScenarioConfig, run_scenario
from spinnet.measurement import QndConfig


def quick(**kw):
    base = dict(seed=12, qnd=QndConfig(resolution_std=sio.CLOCK_RESOLUTION_STD), trials=20, sets=2)
    base.update(kw)
    return ScenarioConfig("ramsey-clock", **base)


def test_round_trip_of_every_preset():
    for name in sio.PRESETS:
        cfg = sio.parse_config(preset=name)
        assert sio.parse_config(text=sio.serialize_config(cfg)) == cfg


def test_round_trip_of_infinite_probe():
    cfg = ScenarioConfig("ramsey-clock", seed=2)
    assert math.isinf(cfg.qnd.resolution_std)
    assert sio.parse_config(text=sio.serialize_config(cfg)) == cfg


def test_minimal_config_fills_defaults():
    cfg = sio.parse_config(text='scenario = "ramsey-clock"\nseed = 3\n')
    assert cfg == ScenarioConfig("ramsey-clock", seed=3)


def test_scaling_preset_contents():
    cfg = sio.parse_config(preset="fig3")
    assert cfg.scenario == "network-scaling"
    assert set(cfg.sweep) == {1.0, 2.0, 4.0}
    assert cfg.atoms_per_mode == 45000 and cfg.trials == 200 and cfg.sets == 3
    assert cfg.qnd.resolution_std == sio.CLOCK_RESOLUTION_STD


def test_overrides():
    cfg = sio.parse_config(preset="fig3", overrides=["trials=10", "qnd.resolution_std=20.5", "sweep=[1, 2]"])
    assert cfg.trials == 10 and cfg.qnd.resolution_std == 20.5 and cfg.sweep == (1.0, 2.0)
    with pytest.raises(InvalidConfigError):
        sio.parse_config(preset="fig3", overrides=["trials"])


def test_misspelled_key_is_named():
    with pytest.raises(InvalidConfigError) as info:
        sio.parse_config(text='scenario = "ramsey-clock"\nseed = 3\natoms_per_mod = 10\n')
    assert "atoms_per_mod" in str(info.value) and "atoms_per_mode" in str(info.value)
    with pytest.raises(InvalidConfigError):
        sio.parse_config(text='scenario = "ramsey-clock"\nseed = 3\n[qnd]\nresolution = 3\n')
    with pytest.raises(InvalidConfigError):
        sio.parse_config(preset="fig9")


def test_parse_error_reports_position():
    with pytest.raises(InvalidConfigError) as info:
        sio.parse_config(text='scenario = "ramsey-clock"\nseed = = 3\n')
    assert "line 2" in str(info.value)


def test_wrong_type_rejected():
    with pytest.raises(InvalidConfigError):
        sio.parse_config(text='scenario = "ramsey-clock"\nseed = "abc"\n')
    with pytest.raises(InvalidConfigError):
        sio.parse_config(text='scenario = "ramsey-clock"\nseed = 3\ntrials = 2.5\n')


def test_missing_file(tmp_path):
    with pytest.raises(InvalidConfigError):
        sio.parse_config(tmp_path / "none.toml")


def test_export_of_empty_report(tmp_path):
    b = sio.export(RunReport(None), tmp_path / "empty")
    rows = sio.read_trials(b.trials)
    assert rows == []
    assert json.loads(b.manifest.read_text())["seed"] is None


def test_export_contents(tmp_path):
    report = run_scenario(quick())
    b = sio.export(report, tmp_path / "out")
    manifest = json.loads(b.manifest.read_text())
    assert manifest["config_sha256"] == hashlib.sha256(b.config.read_bytes()).hexdigest()
    assert manifest["seed"] == 12 and manifest["scenario"] == "ramsey-clock"
    assert set(manifest["files"]) >= {"config.toml", "trials.csv", "summary.json"}
    assert sio.parse_config(b.config) == report.config
    rows = sio.read_trials(b.trials)
    assert len(rows) == len(report.rows)
    assert b.trials.read_text().startswith("#")


def test_summary_recomputed_from_trial_table(tmp_path):
    report = run_scenario(quick(sets=3))
    b = sio.export(report, tmp_path / "out")
    rows = sio.read_trials(b.trials)
    summary = json.loads(b.summary.read_text())
    for g in summary["groups"]:
        sets = [np.array([r["delta_jz"] for r in rows if r["group"] == g["group"] and r["set"] == s]) for s in range(3)]
        var = metrology.pooled_variance(sets)
        assert math.isclose(g["pooled"]["var_delta_jz_spins2"], var, rel_tol=1e-12)
        xi = metrology.to_db(var / (g["readout_contrast"] ** 2 * g["n_modes"] * g["atoms_per_mode"] / 4))
        assert math.isclose(g["pooled"]["xi_net_db"], xi, rel_tol=1e-12)


def test_rerun_gives_identical_trial_table(tmp_path):
    cfg = quick()
    a = sio.export(run_scenario(cfg), tmp_path / "a")
    rerun = sio.parse_config(a.config)
    b = sio.export(run_scenario(rerun, workers=3, order=np.random.default_rng(5)), tmp_path / "b")
    assert a.trials.read_bytes() == b.trials.read_bytes()


def test_gradient_figure_columns(tmp_path):
    cfg = ScenarioConfig("gradient-scan", seed=1, qnd=QndConfig(resolution_std=sio.CLOCK_RESOLUTION_STD),
                         trials=10, sets=1, sweep=(-1.0, 0.0, 1.0))
    b = sio.export(run_scenario(cfg), tmp_path / "g")
    text = (b.directory / "fig2c_gradient.csv").read_text()
    header = [ln for ln in text.splitlines() if not ln.startswith("#")][0]
    assert header.split(",") == ["variant", "amperes", "theta_mrad", "sem_mrad"]


def test_export_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError):
        sio.export(RunReport(None), blocker / "sub")


# -- command line ------------------------------------------------------------------


def test_cli_list_and_validate(capsys):
    assert cli.main(["list-presets"]) == 0
    assert "fig3" in capsys.readouterr().out
    assert cli.main(["validate", "--preset", "fig3", "--trials", "7"]) == 0
    assert "trials = 7" in capsys.readouterr().out


def test_cli_run(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["run", "--preset", "fig3", "--trials", "5", "--sets", "1", "--override", "sweep=[1, 2]",
                     "--out", str(out)])
    assert code == 0
    assert (out / "fig3_scaling.csv").exists() and (out / "manifest.json").exists()


def test_cli_config_error_exit(tmp_path, capsys):
    assert cli.main(["run", "--preset", "fig3", "--override", "M=3", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["validate"]) == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_cli_state_error_exit(tmp_path):
    args = ["run", "--preset", "fig3", "--trials", "2", "--sets", "1", "--override", "background_detuning=5000.0",
            "--out", str(tmp_path / "x")]
    assert cli.main(args) == cli.EXIT_STATE


def test_cli_io_error_exit(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    args = ["run", "--preset", "fig3", "--trials", "2", "--sets", "1", "--override", "sweep=[1]",
            "--out", str(blocker / "sub")]
    assert cli.main(args) == cli.EXIT_IO


def test_cli_calibrate_writes_config(tmp_path):
    out = tmp_path / "cal.toml"
    assert cli.main(["calibrate", "--preset", "fig3", "--target", "0", "--out", str(out)]) == 0
    assert math.isinf(sio.parse_config(out).qnd.resolution_std)
