"""Timed pulse sequences and their execution against a network state."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from . import metrology
from .errors import InvalidConfigError, InvalidStateError, SpinNetError
from .measurement import MeasurementRecord, QndConfig, fluorescence_sample, qnd_update
from .network import NetworkState, accumulate_phase, advance_time, rotate

EVENT_KINDS = ("microwave", "raman_pi", "free_evolution", "qnd_probe", "gradient_window", "fluorescence")
MEASUREMENT_KINDS = ("qnd_probe", "fluorescence")

# microwave pi/2 duration at a ~2pi x 3 kHz Rabi frequency
DEFAULT_TAU_0 = 80e-6
DEFAULT_TAU_K = 2e-6
DEFAULT_T_0 = 1e-6


@dataclass(frozen=True)
class PulseEvent:
    kind: str
    start_time: float
    duration: float
    phase: float = 0.0
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise InvalidConfigError(f"unknown pulse kind {self.kind!r}")
        if self.duration < 0:
            raise InvalidConfigError(f"{self.kind} event has negative duration {self.duration}")
        object.__setattr__(self, "extra", MappingProxyType(dict(self.extra)))

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration


@dataclass(frozen=True)
class Timeline:
    events: tuple[PulseEvent, ...]
    interrogation_time: float
    tau_0: float = DEFAULT_TAU_0
    tau_k: float = DEFAULT_TAU_K
    T_0: float = DEFAULT_T_0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        for prev, ev in zip(self.events, self.events[1:]):
            if ev.start_time < prev.start_time:
                raise InvalidConfigError("timeline events are not sorted by start time")
            if ev.start_time < prev.end_time - 1e-15:
                raise InvalidConfigError(
                    f"{prev.kind} at {prev.start_time:g} s overlaps {ev.kind} at {ev.start_time:g} s"
                )
        kinds = [e.kind for e in self.events]
        if "fluorescence" in kinds and kinds.index("fluorescence") != len(kinds) - 1:
            raise InvalidConfigError("fluorescence readout destroys the state and must be the last event")

    @property
    def duration(self) -> float:
        if not self.events:
            return 0.0
        return self.events[-1].end_time - self.events[0].start_time

    @property
    def raman_span(self) -> float:
        """Time from the first Raman pulse start to the last Raman pulse end."""
        raman = [e for e in self.events if e.kind == "raman_pi"]
        if not raman:
            return 0.0
        return raman[-1].end_time - raman[0].start_time

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def readout_index(self) -> int | None:
        for i in range(len(self.events) - 1, -1, -1):
            if self.events[i].kind in MEASUREMENT_KINDS:
                return i
        return None


class _Builder:
    def __init__(self):
        self.t = 0.0
        self.events: list[PulseEvent] = []

    def add(self, kind, duration, phase=0.0, **extra):
        self.events.append(PulseEvent(kind, self.t, duration, phase, extra))
        self.t += duration

    def wait(self, duration):
        if duration > 0:
            self.add("free_evolution", duration)


def _check_positive(**values):
    for name, v in values.items():
        if not v > 0:
            raise InvalidConfigError(f"{name} must be positive, got {v}")


def build_ramsey(
    T_int: float,
    *,
    tau_0: float = DEFAULT_TAU_0,
    entangle: bool = True,
    readout: str = "qnd_probe",
    final_phase: float = 0.0,
) -> Timeline:
    """pi/2 - free(T_int) - pi/2, then a readout marker.

    The two pi/2 pulses turn about opposite axes so that the pair is the
    identity on the quadratures: the squeezed Jz becomes the phase quadrature
    during the free evolution and is brought back for readout.
    """
    if T_int < 0:
        raise InvalidConfigError(f"T_int must be non-negative, got {T_int}")
    b = _Builder()
    if entangle:
        b.add("qnd_probe", 0.0)
    b.add("microwave", tau_0, math.pi, area=math.pi / 2)
    b.wait(T_int)
    b.add("microwave", tau_0, final_phase, area=math.pi / 2)
    if readout:
        b.add(readout, 0.0)
    return Timeline(tuple(b.events), T_int, tau_0=tau_0, name="ramsey")


def build_echo(
    T_int: float,
    gradient_second_half=None,
    *,
    final_phase: float = 0.0,
    tau_0: float = DEFAULT_TAU_0,
    entangle: bool = True,
    readout: str = "qnd_probe",
    microwaves: bool = True,
) -> Timeline:
    """pi/2 - free(T_int) - pi - gradient(T_int) - pi/2 with a scannable final phase.

    ``gradient_second_half`` is a per-mode detuning map (rad/s) active only in
    the second free interval.  ``microwaves=False`` keeps the probes and the
    gradient but drops every microwave pulse.
    """
    _check_positive(T_int=T_int)
    gradient = 0.0 if gradient_second_half is None else gradient_second_half
    b = _Builder()
    if entangle:
        b.add("qnd_probe", 0.0)
    if microwaves:
        b.add("microwave", tau_0, 0.0, area=math.pi / 2)
    b.wait(T_int)
    if microwaves:
        b.add("microwave", 2 * tau_0, 0.0, area=math.pi)
    b.add("gradient_window", T_int, detuning=gradient)
    if microwaves:
        b.add("microwave", tau_0, final_phase, area=math.pi / 2)
    if readout:
        b.add(readout, 0.0)
    return Timeline(tuple(b.events), T_int, tau_0=tau_0, name="echo")


def build_interferometer(
    T_int: float,
    T_0: float = DEFAULT_T_0,
    tau_0: float = DEFAULT_TAU_0,
    tau_k: float = DEFAULT_TAU_K,
    *,
    accelerations=None,
    k_mag: float = metrology.CONSTANTS.k_mag,
    final_raman_phase: float = 0.0,
    entangle: bool = True,
    readout: str = "fluorescence",
) -> Timeline:
    """Differential light-pulse interferometer bracketed by microwave pi/2 pulses.

    Raman pi - T_int - [Raman pi, microwave pi, Raman pi] - T_int - Raman pi,
    with T_0 gaps between sequential pulses.  Per-mode acceleration phases
    from the closed-form response are injected in the second interrogation
    window, oriented so that mode m reads out ``s_m * phase_m``.
    """
    _check_positive(T_int=T_int, T_0=T_0, tau_0=tau_0, tau_k=tau_k)
    if accelerations is None:
        detuning = 0.0
    else:
        detuning = metrology.interferometer_phase(accelerations, k_mag, T_int, T_0, tau_0, tau_k) / T_int
    b = _Builder()
    if entangle:
        b.add("qnd_probe", 0.0)
    b.add("microwave", tau_0, math.pi, area=math.pi / 2)
    b.wait(T_0)
    b.add("raman_pi", tau_k, 0.0)
    b.wait(T_int)
    b.add("raman_pi", tau_k, 0.0)
    b.wait(T_0)
    b.add("microwave", 2 * tau_0, 0.0, area=math.pi)
    b.wait(T_0)
    b.add("raman_pi", tau_k, 0.0)
    b.add("gradient_window", T_int, detuning=detuning)
    b.add("raman_pi", tau_k, final_raman_phase)
    b.wait(T_0)
    b.add("microwave", tau_0, math.pi, area=math.pi / 2)
    if readout:
        b.add(readout, 0.0)
    return Timeline(tuple(b.events), T_int, tau_0=tau_0, tau_k=tau_k, T_0=T_0, name="interferometer")


@dataclass(frozen=True)
class NoiseConfig:
    """Technical noise and probe settings applied while running a timeline."""

    lo_noise_std: float = 0.0
    raman_phase_std: float = 0.0
    readout_std: float = 0.0
    qnd: QndConfig = field(default_factory=QndConfig)
    background_detuning: float | Sequence[float] = 0.0

    def __post_init__(self):
        for name in ("lo_noise_std", "raman_phase_std", "readout_std"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative")


def _detuning(noise: NoiseConfig, state: NetworkState, extra=0.0) -> np.ndarray:
    base = np.broadcast_to(np.asarray(noise.background_detuning, dtype=float), (state.n_modes,))
    try:
        add = np.broadcast_to(np.asarray(extra, dtype=float), (state.n_modes,))
    except ValueError as exc:
        raise InvalidConfigError(
            f"detuning map of length {np.size(extra)} does not match {state.n_modes} modes"
        ) from exc
    return base + add


def _apply(state, ev: PulseEvent, noise: NoiseConfig, rng):
    if ev.kind == "microwave":
        return rotate(state, ev.phase, ev.extra.get("area", math.pi / 2), noise.lo_noise_std, rng)
    if ev.kind == "raman_pi":
        return rotate(state, ev.phase, math.pi, noise.raman_phase_std, rng)
    if ev.kind == "free_evolution":
        return accumulate_phase(state, _detuning(noise, state), ev.duration)
    if ev.kind == "gradient_window":
        return accumulate_phase(state, _detuning(noise, state, ev.extra.get("detuning", 0.0)), ev.duration)
    raise InvalidConfigError(f"cannot apply {ev.kind} as a state transformation")


def run_timeline(
    state: NetworkState,
    timeline: Timeline,
    noise: NoiseConfig,
    rng: np.random.Generator,
    *,
    trial_index: int = 0,
) -> MeasurementRecord:
    """Execute one trial and return its measurement record.

    The first QND probe before the readout is the entangling measurement;
    its conditional estimate of sum(Jz) is the first outcome (zero when the
    timeline has no such probe).  The last measurement event is the readout.
    """
    readout = timeline.readout_index()
    if readout is None:
        raise InvalidConfigError("timeline has no readout event")
    m = state.n_modes
    first_est = 0.0
    first_modes = np.zeros(m)
    first_raw = math.nan
    seen_probe = False
    second = math.nan
    z_final = None
    for i, ev in enumerate(timeline.events):
        try:
            if i == readout:
                readout_contrast = state.contrast
                if ev.kind == "qnd_probe":
                    state, second, z_final = qnd_update(state, noise.qnd, rng)
                    if not noise.qnd.informative:
                        raise InvalidConfigError("a QND readout needs a finite resolution_std")
                else:
                    second, z_final = fluorescence_sample(state, noise.readout_std, rng)
                state = advance_time(state, ev.duration)
                break
            if ev.kind == "qnd_probe":
                state, y, _ = qnd_update(state, noise.qnd, rng)
                state = advance_time(state, ev.duration)
                if not seen_probe:
                    seen_probe = True
                    first_raw = y
                    first_est = state.sum_jz_mean
                    first_modes = np.array(state.jz_mean)
            elif ev.kind == "fluorescence":
                raise InvalidStateError("fluorescence before the readout would destroy the state")
            else:
                state = _apply(state, ev, noise, rng)
        except SpinNetError as exc:
            exc.event_index = i
            if f"[event {i}" not in str(exc):
                exc.args = (f"[event {i} {ev.kind}] {exc.args[0] if exc.args else ''}",)
            raise
    delta = second - first_est
    n_per_mode = state.total_atoms / m
    theta = metrology.theta_bar(delta, m, n_per_mode, readout_contrast)
    return MeasurementRecord(
        first_outcome=first_est,
        second_outcome=second,
        delta_jz=delta,
        theta_bar=theta,
        trial_index=trial_index,
        per_mode_delta=z_final - first_modes,
        first_raw=first_raw,
        contrast=readout_contrast,
    )


def response_gains(state: NetworkState, timeline: Timeline, kind: str = "microwave") -> np.ndarray:
    """First-order sensitivity of theta_bar to a unit phase error on each pulse of ``kind``.

    Evaluated deterministically on the mean trajectory, so the technical
    std of theta_bar for independent per-pulse errors of std s is
    ``s * norm(gains)``.
    """
    eps = 1e-6
    idx = [i for i, e in enumerate(timeline.events) if e.kind == kind]
    gains = np.zeros(len(idx))
    m = state.n_modes
    scale = metrology.theta_bar(1.0, m, state.total_atoms / m, state.contrast)

    def final_sum(offsets):
        s = state
        for i, ev in enumerate(timeline.events):
            if ev.kind in MEASUREMENT_KINDS:
                continue
            if ev.kind in ("microwave", "raman_pi"):
                area = ev.extra.get("area", math.pi / 2) if ev.kind == "microwave" else math.pi
                s = rotate(s, ev.phase + offsets.get(i, 0.0), area)
            else:
                s = _apply(s, ev, NoiseConfig(), None)
        return s.sum_jz_mean

    base = final_sum({})
    for j, i in enumerate(idx):
        gains[j] = (final_sum({i: eps}) - base) / eps * scale
    return gains
