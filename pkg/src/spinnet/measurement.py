"""Collective Jz measurements: the shared QND probe and fluorescence readout."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidConfigError, InvalidStateError
from .network import GaussianMoments, NetworkState, check_covariance

BACKACTION_MODES = ("minimum-uncertainty", "explicit")


@dataclass(frozen=True)
class QndConfig:
    """Probe settings.

    ``resolution_std`` is the detection noise of one probe on sum(Jz), in
    spins; ``math.inf`` is an uninformative probe.  In ``explicit`` backaction
    mode ``backaction_variance`` is added to every mode's Var(Jy) before the
    uncertainty floor is enforced.
    """

    resolution_std: float = math.inf
    backaction_mode: str = "minimum-uncertainty"
    backaction_variance: float = 0.0
    contrast_cost: float = 0.0
    ac_stark_shift: float = 1.0

    def __post_init__(self):
        if not self.resolution_std > 0:
            raise InvalidConfigError(f"qnd.resolution_std must be positive, got {self.resolution_std}")
        if self.backaction_mode not in BACKACTION_MODES:
            raise InvalidConfigError(
                f"qnd.backaction_mode must be one of {BACKACTION_MODES}, got {self.backaction_mode!r}"
            )
        if self.backaction_variance < 0:
            raise InvalidConfigError("qnd.backaction_variance must be non-negative")
        if not 0.0 <= self.contrast_cost < 1.0:
            raise InvalidConfigError(f"qnd.contrast_cost must lie in [0, 1), got {self.contrast_cost}")

    @property
    def informative(self) -> bool:
        return math.isfinite(self.resolution_std)


@dataclass(frozen=True)
class MeasurementRecord:
    first_outcome: float
    second_outcome: float
    delta_jz: float
    theta_bar: float
    trial_index: int = 0
    # per-mode Jz shifts, visible to the simulation only
    per_mode_delta: np.ndarray | None = None
    first_raw: float = math.nan
    contrast: float = math.nan


def sample_jz(state: NetworkState, rng: np.random.Generator) -> np.ndarray:
    """Draw one realisation of the per-mode Jz vector from the current moments."""
    cov = state.jz_covariance
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    g = rng.standard_normal(state.n_modes)
    return state.jz_mean + v @ (np.sqrt(np.clip(w, 0.0, None)) * g)


def _apply_backaction(state: NetworkState, cov: np.ndarray, cfg: QndConfig, contrast: float) -> np.ndarray:
    m = state.n_modes
    cov = cov.copy()
    if cfg.backaction_mode == "explicit":
        cov[m:, m:] += np.eye(m) * cfg.backaction_variance
    bounds = (0.25 * contrast * state.atom_numbers) ** 2
    for i in range(m):
        vz, vy, c = cov[i, i], cov[m + i, m + i], cov[i, m + i]
        if vz <= 0:
            raise InvalidStateError(f"mode {i} Jz variance collapsed to {vz}")
        # determinant (not just the product) must clear the bound so later rotations keep it
        deficit = (bounds[i] + c * c) / vz - vy
        if deficit > 0:
            cov[m + i, m + i] += deficit
    return cov


def qnd_update(
    state: NetworkState, cfg: QndConfig, rng: np.random.Generator
) -> tuple[NetworkState, float, np.ndarray]:
    """QND probe returning the posterior state, the reading and the sampled Jz vector."""
    if state.n_modes < 1:
        raise InvalidStateError("QND measurement needs at least one mode")
    check_covariance(state.moments.covariance)
    m = state.n_modes
    cov = np.array(state.moments.covariance)
    mean = np.array(state.moments.mean)
    z = sample_jz(state, rng)
    noise = float(rng.standard_normal())
    contrast = state.contrast * (1.0 - cfg.contrast_cost)
    if cfg.informative:
        y = float(np.sum(z)) + cfg.resolution_std * noise
        h = np.zeros(2 * m)
        h[:m] = 1.0
        gain_vec = cov @ h
        innovation_var = float(h @ gain_vec) + cfg.resolution_std**2
        mean = mean + gain_vec * (y - float(h @ mean)) / innovation_var
        cov = cov - np.outer(gain_vec, gain_vec) / innovation_var
    else:
        y = math.nan
    cov = _apply_backaction(state, 0.5 * (cov + cov.T), cfg, contrast)
    out = replace(
        state,
        moments=GaussianMoments(mean, 0.5 * (cov + cov.T)),
        contrast=contrast,
        frame_phase=state.frame_phase + cfg.ac_stark_shift,
    )
    return out, y, z


def qnd_measure(state: NetworkState, cfg: QndConfig, rng: np.random.Generator) -> tuple[NetworkState, float]:
    """Shared nondemolition measurement of sum(Jz) over all modes.

    The reading is distributed as N(sum <Jz>, h^T S h + sigma_r^2) and the
    moments are replaced by their conditional values given it.  Conditioning
    on the sum alone correlates the modes negatively, which is the entangling
    step.  With an infinite ``resolution_std`` the reading is NaN and the
    moments are left as they were.
    """
    out, y, _ = qnd_update(state, cfg, rng)
    return out, y


def fluorescence_sample(
    state: NetworkState, readout_std: float, rng: np.random.Generator
) -> tuple[float, np.ndarray]:
    if readout_std < 0:
        raise InvalidConfigError(f"readout_std must be non-negative, got {readout_std}")
    z = sample_jz(state, rng)
    noise = float(rng.standard_normal())
    return float(np.sum(z)) + readout_std * noise, z


def fluorescence_readout(state: NetworkState, readout_std: float, rng: np.random.Generator) -> float:
    """Destructive population readout of sum(Jz); individual modes are not resolved."""
    y, _ = fluorescence_sample(state, readout_std, rng)
    return y
