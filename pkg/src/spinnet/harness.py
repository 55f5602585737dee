"""Reproducible Monte Carlo experiments on spin networks.

A scenario expands into *groups* (one variant at one sweep value).  Every
trial of every group draws from its own counter-based random stream keyed by
(seed, scenario, group, set, trial), so results do not depend on the order
or concurrency with which trials are executed.
"""
from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metrology
from .errors import CalibrationError, InvalidConfigError, SpinNetError
from .measurement import MeasurementRecord, QndConfig
from .metrology import StatsSummary
from .network import NetworkState, init_css, split_network
from .sequencer import (
    DEFAULT_T_0,
    DEFAULT_TAU_0,
    DEFAULT_TAU_K,
    NoiseConfig,
    PulseEvent,
    Timeline,
    build_echo,
    build_interferometer,
    build_ramsey,
    run_timeline,
)

log = logging.getLogger(__name__)

SCENARIOS = ("phase-scan", "gradient-scan", "network-scaling", "ramsey-clock", "interferometer", "contrast-curve")

VARIANTS = {
    "phase-scan": ("mode+", "mode-", "ME", "CSS"),
    "gradient-scan": ("ME", "no-pulses"),
    "network-scaling": ("ME", "MS", "MS-no-ramsey", "CSS"),
    "ramsey-clock": ("ME", "MS", "CSS"),
    "interferometer": ("ME", "CSS"),
    "contrast-curve": ("contrast",),
}


@dataclass(frozen=True)
class Timings:
    T_int: float
    T_0: float = DEFAULT_T_0
    tau_0: float = DEFAULT_TAU_0
    tau_k: float = DEFAULT_TAU_K

    def __post_init__(self):
        for name in ("T_int", "T_0", "tau_0", "tau_k"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"timings.{name} must be positive, got {getattr(self, name)}")


DEFAULT_TIMINGS = {
    "phase-scan": Timings(110e-6),
    "gradient-scan": Timings(110e-6),
    "network-scaling": Timings(100e-6),
    "ramsey-clock": Timings(100e-6),
    "interferometer": Timings(50e-6),
    "contrast-curve": Timings(100e-6),
}

DEFAULT_SWEEPS = {
    "phase-scan": tuple(float(v) for v in np.linspace(-8e-3, 8e-3, 9)),
    "gradient-scan": (0.0, 0.5, 1.0, 1.5, 2.0),
    "network-scaling": (1.0, 2.0, 4.0),
    "ramsey-clock": (),
    "interferometer": (),
    "contrast-curve": tuple(float(v) for v in np.linspace(0.0, 1.6e-6, 9)),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete description of one simulated experiment.

    ``sweep`` is scenario specific: final-pulse phase offsets in rad
    (phase-scan), coil currents in A (gradient-scan), mode counts
    (network-scaling) or separation times in s (contrast-curve).  An empty
    ``sweep`` or ``variants`` selects the scenario default.  ``decay_time``
    of 0 derives the contrast decay time from the thermal wavelength.
    """

    scenario: str
    seed: int
    M: int = 2
    atoms_per_mode: float = 45000.0
    contrast: float = 0.78
    qnd: QndConfig = field(default_factory=QndConfig)
    lo_noise_std: float = 0.0
    raman_phase_std: float = 0.0
    readout_std: float = 0.0
    trials: int = 200
    sets: int = 3
    timings: Timings | None = None
    sweep: tuple[float, ...] = ()
    variants: tuple[str, ...] = ()
    gradient_slope: float = 1.7e-3
    accelerations: tuple[float, ...] = ()
    ensemble_temperature: float = 25e-6
    decay_time: float = 0.46e-6
    separation: float = 20e-6
    background_detuning: float = 0.0
    partition_noise: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise InvalidConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        _check_power_of_two("M", self.M)
        if not self.atoms_per_mode > 0:
            raise InvalidConfigError(f"atoms_per_mode must be positive, got {self.atoms_per_mode}")
        if not 0 < self.contrast <= 1:
            raise InvalidConfigError(f"contrast must lie in (0, 1], got {self.contrast}")
        for name in ("lo_noise_std", "raman_phase_std", "readout_std"):
            if not getattr(self, name) >= 0:
                raise InvalidConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if int(self.trials) != self.trials or self.trials < 2:
            raise InvalidConfigError(f"trials must be an integer >= 2, got {self.trials}")
        if int(self.sets) != self.sets or self.sets < 1:
            raise InvalidConfigError(f"sets must be a positive integer, got {self.sets}")
        for name in ("ensemble_temperature", "separation"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.decay_time >= 0:
            raise InvalidConfigError(f"decay_time must be non-negative, got {self.decay_time}")
        if self.timings is None:
            object.__setattr__(self, "timings", DEFAULT_TIMINGS[self.scenario])
        object.__setattr__(self, "sweep", tuple(float(v) for v in (self.sweep or DEFAULT_SWEEPS[self.scenario])))
        object.__setattr__(self, "variants", tuple(self.variants or VARIANTS[self.scenario]))
        object.__setattr__(self, "accelerations", tuple(float(a) for a in self.accelerations))
        object.__setattr__(self, "trials", int(self.trials))
        object.__setattr__(self, "sets", int(self.sets))
        object.__setattr__(self, "M", int(self.M))
        bad = [v for v in self.variants if v not in VARIANTS[self.scenario]]
        if bad:
            raise InvalidConfigError(f"variants {bad} not available for {self.scenario}; choose from {VARIANTS[self.scenario]}")
        if self.scenario == "network-scaling":
            for m in self.sweep:
                _check_power_of_two("sweep (mode count)", m)
        if self.scenario == "contrast-curve" and any(t < 0 for t in self.sweep):
            raise InvalidConfigError("contrast-curve separation times must be non-negative")
        if self.accelerations and len(self.accelerations) != self.M:
            raise InvalidConfigError(f"accelerations needs {self.M} entries, got {len(self.accelerations)}")

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(
            lo_noise_std=self.lo_noise_std,
            raman_phase_std=self.raman_phase_std,
            readout_std=self.readout_std,
            qnd=self.qnd,
            background_detuning=self.background_detuning,
        )


def _check_power_of_two(name, value) -> None:
    if isinstance(value, bool) or int(value) != value or value < 1 or (int(value) & (int(value) - 1)):
        raise InvalidConfigError(f"{name} must be a power of two, got {value}")


# -- random streams -----------------------------------------------------------


def scenario_key(scenario: str) -> int:
    return zlib.crc32(scenario.encode())


def trial_stream(seed: int, scenario: str, group_id: int, set_index: int, trial_index: int) -> np.random.Generator:
    """Independent generator for one trial, derived by counter-based splitting."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(scenario_key(scenario), group_id, set_index, trial_index))
    return np.random.Generator(np.random.Philox(ss))


# -- groups -------------------------------------------------------------------


@dataclass(frozen=True)
class Group:
    group_id: int
    variant: str
    sweep_value: float
    n_modes: int
    atoms_per_mode: float
    kind: str  # "network", "separable" or "contrast"
    state: NetworkState | None = None
    timeline: Timeline | None = None
    noise: NoiseConfig | None = None

    @property
    def key(self) -> str:
        return f"{self.variant}@{self.sweep_value:.12g}"


def prepare_network(n_modes: int, atoms_per_mode: float, contrast: float, separation: float = 20e-6) -> NetworkState:
    """Coherent network of n_modes equal modes obtained by repeated Raman splitting."""
    state = init_css(n_modes * atoms_per_mode, contrast)
    levels = int(round(math.log2(n_modes)))
    for _ in range(levels):
        state = split_network(state, separation)
    return state


def two_probe_timeline() -> Timeline:
    """Entangling probe followed directly by the readout probe, no pulses."""
    events = (PulseEvent("qnd_probe", 0.0, 0.0), PulseEvent("qnd_probe", 0.0, 0.0))
    return Timeline(events, 0.0, name="two-probe")


def _ramsey_groups(cfg: ScenarioConfig, gid: int, M: int, variants, sweep_value) -> list[Group]:
    t = cfg.timings
    noise = cfg.noise
    out = []
    for v in variants:
        if v == "ME":
            out.append(Group(gid, v, sweep_value, M, cfg.atoms_per_mode, "network",
                             prepare_network(M, cfg.atoms_per_mode, cfg.contrast, cfg.separation),
                             build_ramsey(t.T_int, tau_0=t.tau_0), noise))
        elif v == "MS":
            out.append(Group(gid, v, sweep_value, M, cfg.atoms_per_mode, "separable",
                             init_css(cfg.atoms_per_mode, cfg.contrast),
                             build_ramsey(t.T_int, tau_0=t.tau_0), noise))
        elif v == "MS-no-ramsey":
            out.append(Group(gid, v, sweep_value, 1, cfg.atoms_per_mode, "network",
                             init_css(cfg.atoms_per_mode, cfg.contrast), two_probe_timeline(), noise))
        elif v == "CSS":
            out.append(Group(gid, v, sweep_value, M, cfg.atoms_per_mode, "network",
                             prepare_network(M, cfg.atoms_per_mode, cfg.contrast, cfg.separation),
                             build_ramsey(t.T_int, tau_0=t.tau_0, entangle=False), noise))
        else:
            continue
        gid += 1
    return out


def build_groups(cfg: ScenarioConfig) -> list[Group]:
    """Expand a scenario into its ordered list of trial groups."""
    t = cfg.timings
    noise = cfg.noise
    groups: list[Group] = []

    def add(*args):
        groups.append(Group(len(groups), *args))

    if cfg.scenario == "phase-scan":
        for v in cfg.variants:
            for phi in cfg.sweep:
                if v in ("mode+", "mode-"):
                    sign = 1 if v == "mode+" else -1
                    state = init_css(cfg.M * cfg.atoms_per_mode, cfg.contrast, orientation_sign=sign)
                    add(v, phi, 1, cfg.M * cfg.atoms_per_mode, "network", state,
                        build_echo(t.T_int, final_phase=phi, tau_0=t.tau_0), noise)
                else:
                    state = prepare_network(cfg.M, cfg.atoms_per_mode, cfg.contrast, cfg.separation)
                    add(v, phi, cfg.M, cfg.atoms_per_mode, "network", state,
                        build_echo(t.T_int, final_phase=phi, tau_0=t.tau_0, entangle=(v == "ME")), noise)
    elif cfg.scenario == "gradient-scan":
        for v in cfg.variants:
            for amps in cfg.sweep:
                state = prepare_network(cfg.M, cfg.atoms_per_mode, cfg.contrast, cfg.separation)
                # linear current-to-detuning map: slope/T_int rad/s per ampere along each mode's orientation
                detuning = state.orientation_signs * cfg.gradient_slope * amps / t.T_int
                tl = build_echo(t.T_int, detuning, tau_0=t.tau_0, microwaves=(v == "ME"))
                add(v, amps, cfg.M, cfg.atoms_per_mode, "network", state, tl, noise)
    elif cfg.scenario == "network-scaling":
        for v in cfg.variants:
            if v == "MS-no-ramsey":
                groups.extend(_ramsey_groups(cfg, len(groups), 1, [v], 1.0))
                continue
            for m in cfg.sweep:
                groups.extend(_ramsey_groups(cfg, len(groups), int(m), [v], m))
    elif cfg.scenario == "ramsey-clock":
        groups.extend(_ramsey_groups(cfg, 0, cfg.M, cfg.variants, 0.0))
    elif cfg.scenario == "interferometer":
        for v in cfg.variants:
            state = prepare_network(cfg.M, cfg.atoms_per_mode, cfg.contrast, cfg.separation)
            tl = build_interferometer(
                t.T_int, t.T_0, t.tau_0, t.tau_k,
                accelerations=np.array(cfg.accelerations) if cfg.accelerations else None,
                entangle=(v == "ME"),
            )
            add(v, 0.0, cfg.M, cfg.atoms_per_mode, "network", state, tl, noise)
    elif cfg.scenario == "contrast-curve":
        for T in cfg.sweep:
            add("contrast", T, cfg.M, cfg.atoms_per_mode, "contrast")
    return groups


def decay_time(cfg: ScenarioConfig) -> float:
    if cfg.decay_time > 0:
        return cfg.decay_time
    return metrology.decay_time_from_wavelength(cfg.ensemble_temperature)


def _contrast_trial(cfg: ScenarioConfig, g: Group, rng, trial_index: int) -> MeasurementRecord:
    # peak and trough of the inter-mode fringe, each a population readout
    n_total = g.n_modes * g.atoms_per_mode
    c = metrology.contrast_vs_separation(g.sweep_value, cfg.ensemble_temperature, C0=cfg.contrast, beta=decay_time(cfg))
    sd = math.sqrt(n_total / 4.0 + cfg.readout_std**2)
    trough = -c * n_total / 2.0 + sd * float(rng.standard_normal())
    peak = c * n_total / 2.0 + sd * float(rng.standard_normal())
    delta = peak - trough
    return MeasurementRecord(trough, peak, delta, delta / n_total, trial_index, None, math.nan, cfg.contrast)


def run_trial(cfg: ScenarioConfig, g: Group, set_index: int, trial_index: int) -> MeasurementRecord:
    rng = trial_stream(cfg.seed, cfg.scenario, g.group_id, set_index, trial_index)
    try:
        if g.kind == "contrast":
            return _contrast_trial(cfg, g, rng, trial_index)
        if g.kind == "network":
            return run_timeline(g.state, g.timeline, g.noise, rng, trial_index=trial_index)
        subs = [run_timeline(g.state, g.timeline, g.noise, rng, trial_index=trial_index) for _ in range(g.n_modes)]
    except SpinNetError as exc:
        exc.set_index = set_index
        exc.trial_index = trial_index
        exc.args = (f"[{cfg.scenario} {g.key} set {set_index} trial {trial_index}] {exc.args[0] if exc.args else ''}",)
        raise
    first = sum(r.first_outcome for r in subs)
    second = sum(r.second_outcome for r in subs)
    delta = sum(r.delta_jz for r in subs)
    c = subs[0].contrast
    theta = metrology.theta_bar(delta, g.n_modes, g.atoms_per_mode, c)
    per_mode = np.array([r.delta_jz for r in subs])
    return MeasurementRecord(first, second, delta, theta, trial_index, per_mode, math.nan, c)


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRow:
    group_id: int
    variant: str
    sweep_value: float
    n_modes: int
    set_index: int
    trial_index: int
    record: MeasurementRecord


@dataclass
class GroupResult:
    group_id: int
    variant: str
    sweep_value: float
    n_modes: int
    atoms_per_mode: float
    kind: str
    contrast: float
    per_set: list[StatsSummary]
    pooled: StatsSummary

    @property
    def key(self) -> str:
        return f"{self.variant}@{self.sweep_value:.12g}"


@dataclass
class RunReport:
    config: ScenarioConfig | None
    groups: list[GroupResult] = field(default_factory=list)
    rows: list[TrialRow] = field(default_factory=list)
    derived: dict = field(default_factory=dict)

    def group(self, variant: str, sweep_value: float | None = None) -> GroupResult:
        for g in self.groups:
            if g.variant == variant and (sweep_value is None or math.isclose(g.sweep_value, sweep_value, abs_tol=1e-15)):
                return g
        raise KeyError(f"no group {variant!r} at {sweep_value}")

    def records(self, group_id: int, set_index: int | None = None) -> list[MeasurementRecord]:
        return [
            r.record
            for r in self.rows
            if r.group_id == group_id and (set_index is None or r.set_index == set_index)
        ]

    def values(self, group_id: int, attr: str = "theta_bar", set_index: int | None = None) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.records(group_id, set_index)], dtype=float)


def _value_summary(values) -> StatsSummary:
    x = np.asarray(values, dtype=float)
    return StatsSummary(
        n_trials=int(x.size),
        mean_theta=float(np.mean(x)),
        var_theta=float(np.var(x, ddof=1)),
        var_theta_ci=metrology.variance_ci(x),
        mean_delta_jz=math.nan,
        var_delta_jz=math.nan,
        xi_net_db=math.nan,
        sensitivity=math.nan,
    )


def pooled_summary(delta_sets: Sequence[np.ndarray], M: int, N: float, C: float, per_mode_sets=None) -> StatsSummary:
    """Statistics over several sets with the variance pooled across sets.

    Set means are allowed to drift; only within-set scatter enters the
    variance, so the result equals ``pooled_variance`` of the per-set data.
    """
    scale = C * M * N / 2.0
    theta_sets = [np.asarray(d, dtype=float) / scale for d in delta_sets]
    all_theta = np.concatenate(theta_sets)
    all_delta = np.concatenate([np.asarray(d, dtype=float) for d in delta_sets])
    var_d = metrology.pooled_variance(delta_sets)
    var_t = metrology.pooled_variance(theta_sets)
    dof = sum(len(d) - 1 for d in delta_sets)
    lo_q, hi_q = metrology.stats.chi2.ppf([(1 + metrology.ONE_SIGMA) / 2, (1 - metrology.ONE_SIGMA) / 2], dof)
    xi2 = None
    if per_mode_sets is not None and all(p is not None for p in per_mode_sets):
        centred = [np.asarray(p) - np.mean(p, axis=0) for p in per_mode_sets]
        stacked = np.vstack(centred)
        cov = np.atleast_2d(stacked.T @ stacked) / dof
        xi2, _ = metrology.squeezing_matrix_from_covariance(cov, N, C)
    return StatsSummary(
        n_trials=int(all_delta.size),
        mean_theta=float(np.mean(all_theta)),
        var_theta=var_t,
        var_theta_ci=(dof * var_t / lo_q, dof * var_t / hi_q),
        mean_delta_jz=float(np.mean(all_delta)),
        var_delta_jz=var_d,
        xi_net_db=metrology.to_db(var_d / (C * C * M * N / 4.0)),
        sensitivity=math.sqrt(var_d) / scale,
        squeezing_matrix=xi2,
    )


def _summarise_group(cfg: ScenarioConfig, g: Group, by_set: list[list[MeasurementRecord]]) -> GroupResult:
    contrast = by_set[0][0].contrast
    if g.kind == "contrast":
        per_set = [_value_summary([r.theta_bar for r in recs]) for recs in by_set]
        pooled = _value_summary([r.theta_bar for recs in by_set for r in recs])
        pooled.var_theta = metrology.pooled_variance([[r.theta_bar for r in recs] for recs in by_set])
    else:
        deltas = [np.array([r.delta_jz for r in recs]) for recs in by_set]
        per_mode = [
            np.array([r.per_mode_delta for r in recs]) if recs[0].per_mode_delta is not None else None
            for recs in by_set
        ]
        per_set = [
            metrology.summarize(d, g.n_modes, g.atoms_per_mode, contrast, per_mode=pm)
            for d, pm in zip(deltas, per_mode)
        ]
        pooled = pooled_summary(deltas, g.n_modes, g.atoms_per_mode, contrast, per_mode)
    return GroupResult(g.group_id, g.variant, g.sweep_value, g.n_modes, g.atoms_per_mode, g.kind, contrast, per_set, pooled)


def run_scenario(
    cfg: ScenarioConfig,
    *,
    workers: int = 1,
    order: np.random.Generator | Sequence[int] | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> RunReport:
    """Execute trials x sets of every group and aggregate the statistics.

    ``order`` permutes the execution order (a generator draws a random
    permutation) and ``workers`` runs trials on a thread pool; neither
    changes the trial table.
    """
    groups = build_groups(cfg)
    jobs = [(gi, s, t) for gi in range(len(groups)) for s in range(cfg.sets) for t in range(cfg.trials)]
    if isinstance(order, np.random.Generator):
        sequence = order.permutation(len(jobs))
    elif order is not None:
        sequence = np.asarray(order, dtype=int)
        if sorted(sequence.tolist()) != list(range(len(jobs))):
            raise InvalidConfigError("order must be a permutation of the job indices")
    else:
        sequence = np.arange(len(jobs))

    results: list[MeasurementRecord | None] = [None] * len(jobs)

    def work(j: int) -> None:
        gi, s, t = jobs[j]
        results[j] = run_trial(cfg, groups[gi], s, t)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for done, _ in enumerate(pool.map(work, sequence)):
                if progress:
                    progress(done + 1, len(jobs))
    else:
        for done, j in enumerate(sequence):
            work(int(j))
            if progress:
                progress(done + 1, len(jobs))

    rows = [
        TrialRow(gi, groups[gi].variant, groups[gi].sweep_value, groups[gi].n_modes, s, t, results[j])
        for j, (gi, s, t) in enumerate(jobs)
    ]
    report = RunReport(cfg, rows=rows)
    per = cfg.sets * cfg.trials
    for gi, g in enumerate(groups):
        block = results[gi * per : (gi + 1) * per]
        by_set = [block[s * cfg.trials : (s + 1) * cfg.trials] for s in range(cfg.sets)]
        report.groups.append(_summarise_group(cfg, g, by_set))
    report.derived = derive(report)
    return report


# -- scenario-level analysis --------------------------------------------------


def _fit_dict(fit: metrology.LinearFit) -> dict:
    return {
        "slope": fit.slope,
        "slope_se": fit.slope_se,
        "slope_ci": list(fit.slope_ci),
        "intercept": fit.intercept,
        "intercept_se": fit.intercept_se,
        "intercept_ci": list(fit.intercept_ci),
        "dof": fit.dof,
    }


def _scan_fit(report: RunReport, variant: str) -> metrology.LinearFit | None:
    xs, ys = [], []
    for g in report.groups:
        if g.variant == variant:
            th = report.values(g.group_id)
            xs.append(np.full(th.size, g.sweep_value))
            ys.append(th)
    if len(xs) < 2:
        return None
    return metrology.fit_linear(np.concatenate(xs), np.concatenate(ys))


def _var_se(g: GroupResult) -> float:
    dof = sum(s.n_trials - 1 for s in g.per_set)
    return g.pooled.var_theta * math.sqrt(2.0 / dof)


def derive(report: RunReport) -> dict:
    cfg = report.config
    if cfg is None or not report.groups:
        return {}
    fn = _DERIVERS.get(cfg.scenario)
    return fn(report) if fn else {}


def _derive_phase_scan(report: RunReport) -> dict:
    out: dict = {"fits": {}}
    fits = {}
    for v in report.config.variants:
        f = _scan_fit(report, v)
        if f is not None:
            fits[v] = f
            out["fits"][v] = _fit_dict(f)
    if "mode+" in fits and "mode-" in fits:
        p, m = fits["mode+"], fits["mode-"]
        mean_slope = 0.5 * (p.slope + m.slope)
        mean_se = 0.5 * math.hypot(p.slope_se, m.slope_se)
        out["single_mode_mean_slope"] = mean_slope
        out["single_mode_mean_slope_se"] = mean_se
        out["slope_asymmetry"] = abs(p.slope + m.slope) / max(abs(p.slope), abs(m.slope))
        if "ME" in fits:
            me = fits["ME"]
            out["me_minus_mean_slope"] = me.slope - mean_slope
            out["me_minus_mean_slope_se"] = math.hypot(me.slope_se, mean_se)
    # histograms at the scan point closest to zero phase
    zero = min(report.config.sweep, key=abs)
    hist = {}
    for v in report.config.variants:
        hist[v] = report.values(report.group(v, zero).group_id).tolist()
    if "mode+" in hist and "mode-" in hist:
        hist["MS"] = (0.5 * (np.array(hist["mode+"]) + np.array(hist["mode-"]))).tolist()
    out["histogram_phase"] = zero
    out["histogram_fits"] = {k: vars(metrology.fit_gaussian(v)) for k, v in hist.items()}
    out["histograms"] = hist
    return out


def _derive_gradient(report: RunReport) -> dict:
    cfg = report.config
    out: dict = {"fits": {}}
    for v in cfg.variants:
        f = _scan_fit(report, v)
        if f is not None:
            out["fits"][v] = _fit_dict(f)
    out["injected_slope_rad_per_amp"] = cfg.gradient_slope
    out["injected_detuning_rad_per_s_per_amp"] = cfg.gradient_slope / cfg.timings.T_int
    if "ME" in out["fits"]:
        f = out["fits"]["ME"]
        out["recovered_detuning_rad_per_s_per_amp"] = float(metrology.clock_shift_from_angle(f["slope"], cfg.timings.T_int))
        out["recovered_detuning_se"] = f["slope_se"] / cfg.timings.T_int
    return out


def _derive_scaling(report: RunReport) -> dict:
    cfg = report.config
    out: dict = {"points": []}
    ms_m, ms_dt, ms_err = [], [], []
    xi_me = {}
    for m in cfg.sweep:
        point = {"M": int(m), "qpn_rad": metrology.qpn_limit(int(m), cfg.atoms_per_mode, cfg.contrast)}
        for v in ("ME", "MS", "CSS"):
            if v not in cfg.variants:
                continue
            g = report.group(v, m)
            point[f"{v}_dtheta_rad"] = g.pooled.std_theta
            point[f"{v}_dtheta_err_rad"] = 0.5 * _var_se(g) / g.pooled.std_theta
            point[f"{v}_xi_db"] = g.pooled.xi_net_db
            if v == "MS":
                ms_m.append(m)
                ms_dt.append(g.pooled.std_theta)
                ms_err.append(point["MS_dtheta_err_rad"])
            if v == "ME":
                xi_me[int(m)] = g.pooled.xi_net_db
        out["points"].append(point)
    if len(ms_m) >= 3:
        fit = metrology.fit_power_law(ms_m, ms_dt, ms_err)
        out["ms_exponent"] = fit.slope
        out["ms_exponent_se"] = fit.slope_se
    if 2 in xi_me and 4 in xi_me:
        out["me_improvement_4_vs_2_db"] = xi_me[2] - xi_me[4]
    if "MS-no-ramsey" in cfg.variants:
        base = report.group("MS-no-ramsey")
        out["ms_no_ramsey_var_rad2"] = base.pooled.var_theta
        proj = {}
        for m in cfg.sweep:
            var_proj = base.pooled.var_theta / m
            entry = {"M": int(m), "projected_dtheta_rad": math.sqrt(var_proj)}
            if "ME" in cfg.variants:
                entry["me_vs_projected_db"] = metrology.to_db(var_proj / report.group("ME", m).pooled.var_theta)
            proj[str(int(m))] = entry
        out["projected_ms"] = proj
    return out


def _derive_clock(report: RunReport) -> dict:
    out = {}
    for g in report.groups:
        out[g.variant] = {"xi_db": g.pooled.xi_net_db, "dtheta_rad": g.pooled.std_theta}
    if "ME" in out and "MS" in out:
        out["me_vs_ms_db"] = metrology.to_db(report.group("MS").pooled.var_theta / report.group("ME").pooled.var_theta)
    return out


def _derive_interferometer(report: RunReport) -> dict:
    cfg = report.config
    t = cfg.timings
    k = metrology.CONSTANTS.k_mag
    out: dict = {"scale_factor_rad_per_m_s2": metrology.interferometer_scale_factor(k, t.T_int, t.T_0, t.tau_0, t.tau_k)}
    for g in report.groups:
        out[g.variant] = {
            "dtheta_rad": g.pooled.std_theta,
            "xi_db": g.pooled.xi_net_db,
            "dacc_m_s2": metrology.acceleration_sensitivity(g.pooled.std_theta, k, t.T_int, t.T_0, t.tau_0, t.tau_k),
        }
        series = report.values(g.group_id, set_index=0)
        if series.size >= 8:
            curve = metrology.fractional_stability(series)
            out[g.variant]["stability"] = [
                {"n": n, "deviation_rad": d, "lower_rad": lo, "upper_rad": hi} for n, d, lo, hi in curve.as_rows()
            ]
            out[g.variant]["single_shot_std_rad"] = float(np.std(series, ddof=1))
    if "ME" in out and "CSS" in out:
        me, css = report.group("ME"), report.group("CSS")
        gain = metrology.to_db(css.pooled.var_theta / me.pooled.var_theta)
        rel = math.hypot(_var_se(me) / me.pooled.var_theta, _var_se(css) / css.pooled.var_theta)
        out["gain_db"] = gain
        out["gain_se_db"] = 10.0 / math.log(10.0) * rel
    return out


def _derive_contrast(report: RunReport) -> dict:
    cfg = report.config
    T = np.array([g.sweep_value for g in report.groups])
    c = np.array([g.pooled.mean_theta for g in report.groups])
    sem = np.array([math.sqrt(g.pooled.var_theta / g.pooled.n_trials) for g in report.groups])
    out = {
        "separation_time_s": T.tolist(),
        "contrast_mean": c.tolist(),
        "contrast_sem": sem.tolist(),
        "thermal_wavelength_m": metrology.thermal_wavelength(cfg.ensemble_temperature),
        "relative_velocity_m_s": metrology.recoil_velocity(),
        "model_decay_time_s": decay_time(cfg),
        "wavelength_decay_time_s": metrology.decay_time_from_wavelength(cfg.ensemble_temperature),
    }
    if T.size >= 3:
        c0, beta, cov = metrology.fit_exponential_decay(T, c, sem)
        out["fit_C0"] = c0
        out["fit_beta_s"] = beta
        out["fit_C0_se"] = float(math.sqrt(cov[0, 0]))
        out["fit_beta_se_s"] = float(math.sqrt(cov[1, 1]))
    return out


_DERIVERS = {
    "phase-scan": _derive_phase_scan,
    "gradient-scan": _derive_gradient,
    "network-scaling": _derive_scaling,
    "ramsey-clock": _derive_clock,
    "interferometer": _derive_interferometer,
    "contrast-curve": _derive_contrast,
}


# -- calibration --------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    qnd: QndConfig
    achieved_db: float
    target_db: float
    metric: str
    evaluations: tuple[tuple[float, float], ...]
    no_squeezing_needed: bool = False


def _metric_config(template: ScenarioConfig, metric: str) -> ScenarioConfig:
    if metric == "gain":
        return replace(template, scenario="interferometer", variants=("ME", "CSS"), sweep=(), timings=template.timings)
    timings = template.timings if template.scenario in ("ramsey-clock", "network-scaling") else None
    return replace(template, scenario="ramsey-clock", variants=("ME",), sweep=(), timings=timings)


def probe_metric(template: ScenarioConfig, resolution_std: float, metric: str = "xi_net") -> float:
    """Simulated figure of merit in dB for a probe of the given resolution.

    ``xi_net`` is the pooled network squeezing of the ME Ramsey clock;
    ``gain`` is 10 log10(Var_ME / Var_CSS) of the interferometer, so both
    fall as the probe gets better.
    """
    cfg = _metric_config(template, metric)
    cfg = replace(cfg, qnd=replace(cfg.qnd, resolution_std=resolution_std))
    report = run_scenario(cfg)
    if metric == "gain":
        return -report.derived["gain_db"]
    return report.group("ME").pooled.xi_net_db


def calibrate_probe_detailed(
    target_xi_db: float,
    template: ScenarioConfig,
    *,
    metric: str = "xi_net",
    tolerance_db: float = 0.02,
    max_iter: int = 60,
    monotonic_slack_db: float = 0.05,
) -> CalibrationResult:
    """Bisect log(resolution_std) until the simulated metric hits the target.

    All evaluations share the template seed, so the comparison between
    probe settings uses common random numbers.
    """
    if metric not in ("xi_net", "gain"):
        raise InvalidConfigError(f"metric must be 'xi_net' or 'gain', got {metric!r}")
    if target_xi_db >= 0:
        log.info("target %.3f dB needs no squeezing; probe left uninformative", target_xi_db)
        return CalibrationResult(replace(template.qnd, resolution_std=math.inf), 0.0, target_xi_db, metric, (), True)
    ref = math.sqrt(template.M * template.atoms_per_mode / 4.0)
    lo, hi = math.log(1e-3 * ref), math.log(1e3 * ref)
    evals: dict[float, float] = {}

    def f(log_sigma: float) -> float:
        val = probe_metric(template, math.exp(log_sigma), metric)
        evals[math.exp(log_sigma)] = val
        return val

    f_lo, f_hi = f(lo), f(hi)
    if not f_lo <= target_xi_db <= f_hi:
        raise CalibrationError(
            f"target {target_xi_db} dB is not bracketed by [{f_lo:.3f}, {f_hi:.3f}] dB over the probe range"
        )
    mid, f_mid = lo, f_lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if abs(f_mid - target_xi_db) <= tolerance_db:
            break
        if f_mid < target_xi_db:
            lo = mid
        else:
            hi = mid
    pairs = tuple(sorted(evals.items()))
    values = [v for _, v in pairs]
    if any(b < a - monotonic_slack_db for a, b in zip(values, values[1:])):
        raise CalibrationError(f"metric is not monotone in resolution_std: {pairs}")
    if abs(f_mid - target_xi_db) > 0.1:
        raise CalibrationError(f"bisection stalled at {f_mid:.3f} dB for target {target_xi_db} dB")
    qnd = replace(template.qnd, resolution_std=math.exp(mid))
    return CalibrationResult(qnd, f_mid, target_xi_db, metric, pairs)


def calibrate_probe(target_xi_db: float, template: ScenarioConfig, *, metric: str = "xi_net") -> QndConfig:
    """Probe settings whose simulated metric matches ``target_xi_db``."""
    return calibrate_probe_detailed(target_xi_db, template, metric=metric).qnd


def calibrate_lo_noise(target_theta_std: float, state: NetworkState, timeline: Timeline) -> float:
    """Per-pulse LO phase std producing ``target_theta_std`` of technical theta_bar noise."""
    from .sequencer import response_gains

    norm = float(np.linalg.norm(response_gains(state, timeline, "microwave")))
    if norm == 0:
        raise CalibrationError("timeline is insensitive to LO phase noise")
    return target_theta_std / norm
