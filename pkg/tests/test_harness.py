import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from spinnet import metrology
from spinnet.errors import CalibrationError, InvalidConfigError
from spinnet.harness import (
    ScenarioConfig,
    Timings,
    build_groups,
    calibrate_probe_detailed,
    pooled_summary,
    prepare_network,
    run_scenario,
    trial_stream,
)
from spinnet.io import CLOCK_RESOLUTION_STD
from spinnet.measurement import QndConfig
from spinnet.network import init_css
from spinnet.sequencer import NoiseConfig, build_ramsey, run_timeline

CLOCK = QndConfig(resolution_std=CLOCK_RESOLUTION_STD)


def small(scenario="ramsey-clock", **kw):
    base = dict(seed=5, qnd=CLOCK, trials=30, sets=2)
    base.update(kw)
    return ScenarioConfig(scenario, **base)


def table(report):
    return [(r.group_id, r.set_index, r.trial_index, r.record.delta_jz, r.record.theta_bar) for r in report.rows]


@pytest.mark.parametrize(
    "bad",
    [
        dict(scenario="bogus"),
        dict(M=3),
        dict(M=0),
        dict(seed=-1),
        dict(contrast=0.0),
        dict(trials=1),
        dict(sets=0),
        dict(lo_noise_std=-1.0),
        dict(variants=("mode+",)),
        dict(accelerations=(1.0,)),
        dict(scenario="network-scaling", sweep=(1.0, 3.0)),
    ],
)
def test_config_validation(bad):
    args = dict(scenario="ramsey-clock", seed=1)
    args.update(bad)
    with pytest.raises(InvalidConfigError):
        ScenarioConfig(**args)


def test_timings_validation():
    with pytest.raises(InvalidConfigError):
        Timings(-1.0)


def test_streams_are_independent_and_reproducible():
    a = trial_stream(1, "ramsey-clock", 0, 0, 0).standard_normal(4)
    assert np.array_equal(a, trial_stream(1, "ramsey-clock", 0, 0, 0).standard_normal(4))
    for other in ((2, "ramsey-clock", 0, 0, 0), (1, "phase-scan", 0, 0, 0), (1, "ramsey-clock", 1, 0, 0),
                  (1, "ramsey-clock", 0, 1, 0), (1, "ramsey-clock", 0, 0, 1)):
        assert not np.array_equal(a, trial_stream(*other).standard_normal(4))


def test_groups_follow_variants():
    g = build_groups(ScenarioConfig("network-scaling", seed=1, qnd=CLOCK))
    names = [(x.variant, x.n_modes) for x in g]
    assert ("ME", 4) in names and ("MS", 1) in names and ("MS-no-ramsey", 1) in names
    assert [x.group_id for x in g] == list(range(len(g)))


def test_prepare_network_equal_modes():
    s = prepare_network(4, 45000, 0.78)
    assert s.n_modes == 4 and np.all(s.atom_numbers == 45000)


def test_permutation_and_workers_leave_table_unchanged():
    cfg = small()
    ref = table(run_scenario(cfg))
    assert table(run_scenario(cfg, order=np.random.default_rng(0))) == ref
    assert table(run_scenario(cfg, workers=4, order=np.random.default_rng(1))) == ref
    with pytest.raises(InvalidConfigError):
        run_scenario(cfg, order=[0, 0, 1])


def test_pooled_variance_matches_formula():
    report = run_scenario(small(sets=3))
    for g in report.groups:
        sets = [report.values(g.group_id, "delta_jz", s) for s in range(3)]
        num = sum(np.sum((x - x.mean()) ** 2) for x in sets)
        dof = sum(x.size - 1 for x in sets)
        assert math.isclose(g.pooled.var_delta_jz, num / dof, rel_tol=1e-12)
        assert g.pooled.n_trials == 90


def test_pooled_summary_ignores_set_offsets():
    rng = np.random.default_rng(2)
    base = [rng.normal(0, 30, 100) for _ in range(3)]
    shifted = [x + 500 * i for i, x in enumerate(base)]
    a = pooled_summary(base, 2, 45000, 0.78)
    b = pooled_summary(shifted, 2, 45000, 0.78)
    assert math.isclose(a.var_delta_jz, b.var_delta_jz, rel_tol=1e-12)


def test_progress_callback():
    seen = []
    run_scenario(small(trials=2, sets=1, variants=("CSS",)), progress=lambda i, n: seen.append((i, n)))
    assert seen == [(1, 2), (2, 2)]


def test_me_beats_ms_beats_css():
    d = run_scenario(small(trials=200, sets=3)).derived
    assert d["ME"]["xi_db"] < d["MS"]["xi_db"] < d["CSS"]["xi_db"]
    assert d["me_vs_ms_db"] > 0


def test_ms_and_me_agree_for_weak_probe():
    # an uninformative entangling probe leaves nothing to correlate the modes
    n, c, trials = 45000, 0.78, 1500
    tl = build_ramsey(100e-6, readout="fluorescence")
    noise = NoiseConfig(qnd=QndConfig())
    me_state = prepare_network(2, n, c)
    ms_state = init_css(n, c)
    me, ms = [], []
    for t in range(trials):
        rng = trial_stream(9, "ramsey-clock", 0, 0, t)
        me.append(run_timeline(me_state, tl, noise, rng).theta_bar)
        rng = trial_stream(9, "ramsey-clock", 1, 0, t)
        parts = [run_timeline(ms_state, tl, noise, rng).delta_jz for _ in range(2)]
        ms.append(metrology.theta_bar(sum(parts), 2, n, c))
    f = np.var(me, ddof=1) / np.var(ms, ddof=1)
    p = 2 * min(stats.f.cdf(f, trials - 1, trials - 1), stats.f.sf(f, trials - 1, trials - 1))
    assert p > 0.01


def test_phase_scan_derived_fields():
    cfg = ScenarioConfig("phase-scan", seed=2, qnd=CLOCK, trials=40, sets=1, sweep=(-5e-3, 0.0, 5e-3))
    d = run_scenario(cfg).derived
    for key in ("single_mode_mean_slope", "slope_asymmetry", "me_minus_mean_slope"):
        assert key in d
    assert d["fits"]["mode+"]["slope"] < 0 < d["fits"]["mode-"]["slope"]


def test_contrast_curve_recovers_decay():
    cfg = ScenarioConfig("contrast-curve", seed=4, trials=50, sets=2)
    d = run_scenario(cfg).derived
    assert abs(d["fit_beta_s"] - 0.46e-6) < 4 * d["fit_beta_se_s"]
    assert abs(d["fit_C0"] - 0.78) < 4 * d["fit_C0_se"]


def test_error_is_tagged_with_trial():
    cfg = small(trials=2, sets=1, variants=("CSS",), background_detuning=5000.0)
    with pytest.raises(Exception) as info:
        run_scenario(cfg)
    assert info.value.set_index == 0 and info.value.trial_index == 0
    assert "set 0 trial 0" in str(info.value)


def test_calibrate_target_zero_needs_no_probe():
    res = calibrate_probe_detailed(0.0, small())
    assert res.no_squeezing_needed and math.isinf(res.qnd.resolution_std)


def test_calibrate_rejects_unreachable_target():
    with pytest.raises(CalibrationError):
        calibrate_probe_detailed(-60.0, small(trials=20, sets=1))


def test_calibrate_hits_target():
    template = small(trials=100, sets=2)
    res = calibrate_probe_detailed(-6.0, template, tolerance_db=0.05)
    assert abs(res.achieved_db - (-6.0)) <= 0.05
    again = run_scenario(replace(template, qnd=res.qnd, variants=("ME",)))
    assert math.isclose(again.group("ME").pooled.xi_net_db, res.achieved_db, rel_tol=1e-12)
    with pytest.raises(InvalidConfigError):
        calibrate_probe_detailed(-6.0, template, metric="loudness")
