"""Multimode collective-spin network in the Gaussian (large-N) approximation.

Every mode carries a mean spin of length ``C * N / 2`` pointing along ``+x``
or ``-x`` (its orientation sign).  Only the two transverse quadratures are
tracked: the state holds their means and a joint covariance ordered as
``(Jz_1 .. Jz_M, Jy_1 .. Jy_M)``.  Pulses are linearised about the nominal
mean-spin direction, which keeps every operation a linear map on the moments.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    GaussianValidityWarning,
    InvalidConfigError,
    InvalidStateError,
    NumericalStateError,
    SmallAngleError,
)

SMALL_ANGLE_LIMIT = 0.3
SYMMETRY_RTOL = 1e-12
PSD_TOL = 1e-9
HEISENBERG_SLACK = 1e-9
MIN_GAUSSIAN_ATOMS = 100


@dataclass(frozen=True)
class ModeState:
    momentum_index: int
    atom_number: float
    orientation_sign: int = 1
    position_offset: float = 0.0

    def __post_init__(self):
        if not self.atom_number > 0:
            raise InvalidStateError(f"mode atom_number must be positive, got {self.atom_number}")
        if self.orientation_sign not in (1, -1):
            raise InvalidStateError(f"orientation_sign must be +1 or -1, got {self.orientation_sign}")


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.covariance, dtype=float)
        if mean.ndim != 1 or mean.size % 2:
            raise NumericalStateError(f"mean must be a vector of even length, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise NumericalStateError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def n_modes(self) -> int:
        return self.mean.size // 2

    def check(self) -> None:
        """Raise NumericalStateError unless the covariance is symmetric PSD."""
        check_covariance(self.covariance)


def check_covariance(cov: np.ndarray) -> None:
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise NumericalStateError("covariance contains non-finite entries")
    scale = max(float(np.max(np.abs(cov))), 1e-300)
    asym = float(np.max(np.abs(cov - cov.T)))
    if asym > SYMMETRY_RTOL * scale:
        raise NumericalStateError(f"covariance not symmetric (max asymmetry {asym:.3e})")
    trace = float(np.trace(cov))
    lowest = float(np.linalg.eigvalsh(0.5 * (cov + cov.T))[0])
    if lowest < -PSD_TOL * max(trace, 0.0):
        raise NumericalStateError(
            f"covariance not positive semidefinite (lowest eigenvalue {lowest:.3e}, trace {trace:.3e})"
        )


@dataclass(frozen=True)
class NetworkState:
    modes: tuple[ModeState, ...]
    moments: GaussianMoments
    contrast: float
    elapsed_time: float = 0.0
    # accumulated AC Stark phase from probes; pulses are programmed relative to it
    frame_phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.moments.n_modes != len(self.modes):
            raise InvalidStateError(
                f"moments describe {self.moments.n_modes} modes but state has {len(self.modes)}"
            )
        if not 0.0 < self.contrast <= 1.0:
            raise InvalidStateError(f"contrast must lie in (0, 1], got {self.contrast}")

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def atom_numbers(self) -> np.ndarray:
        return np.array([m.atom_number for m in self.modes], dtype=float)

    @property
    def total_atoms(self) -> float:
        return float(sum(m.atom_number for m in self.modes))

    @property
    def orientation_signs(self) -> np.ndarray:
        return np.array([m.orientation_sign for m in self.modes], dtype=float)

    @property
    def spin_lengths(self) -> np.ndarray:
        """Mean spin length C*N/2 of every mode."""
        return 0.5 * self.contrast * self.atom_numbers

    @property
    def jz_mean(self) -> np.ndarray:
        return self.moments.mean[: self.n_modes]

    @property
    def jy_mean(self) -> np.ndarray:
        return self.moments.mean[self.n_modes :]

    @property
    def jz_covariance(self) -> np.ndarray:
        m = self.n_modes
        return self.moments.covariance[:m, :m]

    @property
    def jy_covariance(self) -> np.ndarray:
        m = self.n_modes
        return self.moments.covariance[m:, m:]

    @property
    def mean_polar_angles(self) -> np.ndarray:
        return self.jz_mean / self.spin_lengths

    @property
    def mean_azimuthal_angles(self) -> np.ndarray:
        return self.jy_mean / self.spin_lengths

    @property
    def sum_jz_mean(self) -> float:
        return float(np.sum(self.jz_mean))

    @property
    def sum_jz_variance(self) -> float:
        return float(np.sum(self.jz_covariance))

    def mode_block(self, index: int) -> np.ndarray:
        """2x2 covariance of (Jz, Jy) for one mode."""
        m = self.n_modes
        idx = [index, m + index]
        return self.moments.covariance[np.ix_(idx, idx)]

    def uncertainty_products(self) -> np.ndarray:
        cov = self.moments.covariance
        m = self.n_modes
        return np.diag(cov)[:m] * np.diag(cov)[m:]

    def heisenberg_bounds(self) -> np.ndarray:
        return (0.25 * self.contrast * self.atom_numbers) ** 2

    def check(self) -> None:
        """Validate covariance and per-mode uncertainty relations."""
        self.moments.check()
        products = self.uncertainty_products()
        bounds = self.heisenberg_bounds()
        bad = products < bounds * (1.0 - HEISENBERG_SLACK)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise NumericalStateError(
                f"mode {i} violates Var(Jz)Var(Jy) >= (CN/4)^2: {products[i]:.6g} < {bounds[i]:.6g}"
            )


def _with_moments(state: NetworkState, mean: np.ndarray, cov: np.ndarray, **changes) -> NetworkState:
    cov = 0.5 * (cov + cov.T)
    return replace(state, moments=GaussianMoments(mean, cov), **changes)


def _check_small_angles(state: NetworkState) -> None:
    for label, angles in (("polar", state.mean_polar_angles), ("azimuthal", state.mean_azimuthal_angles)):
        worst = int(np.argmax(np.abs(angles)))
        if abs(angles[worst]) >= SMALL_ANGLE_LIMIT:
            raise SmallAngleError(
                f"mode {worst} mean {label} angle {angles[worst]:.4f} rad exceeds "
                f"small-angle limit {SMALL_ANGLE_LIMIT} rad"
            )


def init_css(total_atoms: float, contrast: float, orientation_sign: int = 1) -> NetworkState:
    """Single-mode coherent spin state on the equator with Var(Jz) = Var(Jy) = N/4."""
    if not (isinstance(total_atoms, (int, float, np.integer, np.floating)) and total_atoms > 0):
        raise InvalidConfigError(f"total_atoms must be positive, got {total_atoms!r}")
    if not 0.0 < contrast <= 1.0:
        raise InvalidConfigError(f"contrast must lie in (0, 1], got {contrast!r}")
    if total_atoms < MIN_GAUSSIAN_ATOMS:
        warnings.warn(
            f"{total_atoms} atoms is below the Gaussian-validity floor of {MIN_GAUSSIAN_ATOMS}",
            GaussianValidityWarning,
            stacklevel=2,
        )
    n = float(total_atoms)
    mode = ModeState(momentum_index=0, atom_number=n, orientation_sign=orientation_sign)
    moments = GaussianMoments(np.zeros(2), np.eye(2) * n / 4.0)
    return NetworkState(modes=(mode,), moments=moments, contrast=float(contrast))


def split_network(
    state: NetworkState,
    separation: float = 20e-6,
    partition_noise: bool = False,
    rng: np.random.Generator | None = None,
) -> NetworkState:
    """Split every mode into an anti-parallel pair of half-population modes.

    Each parent becomes a +momentum child with the parent's orientation and a
    -momentum child with the opposite orientation, placed at +-separation/2.
    Children start as independent coherent states at Jz = 0, which folds in
    the microwave pi/2 pulse that follows the Raman split.
    """
    if state.contrast <= 0:
        raise InvalidStateError("cannot split a state with no contrast")
    m = state.n_modes
    cov = state.moments.covariance
    off_block = cov - np.diag(np.diag(cov))
    per_mode = np.zeros_like(cov)
    for i in range(m):
        per_mode[i, m + i] = per_mode[m + i, i] = cov[i, m + i]
    if np.any(np.abs(off_block - per_mode) > 1e-9 * max(np.max(np.abs(cov)), 1.0)):
        raise InvalidStateError("split_network requires separable (unentangled) modes")
    if partition_noise and rng is None:
        raise InvalidConfigError("partition_noise requires a random stream")

    children: list[ModeState] = []
    for parent in state.modes:
        if parent.atom_number <= 0:
            raise InvalidStateError("cannot split a mode with no atoms")
        if partition_noise:
            upper = float(rng.binomial(int(round(parent.atom_number)), 0.5))
        else:
            upper = parent.atom_number / 2.0
        lower = parent.atom_number - upper
        if upper <= 0 or lower <= 0:
            raise InvalidStateError("binomial partition produced an empty mode")
        s = parent.orientation_sign
        children.append(
            ModeState(parent.momentum_index + 1, upper, s, parent.position_offset + separation / 2)
        )
        children.append(
            ModeState(parent.momentum_index - 1, lower, -s, parent.position_offset - separation / 2)
        )
    n_child = np.array([c.atom_number for c in children])
    variances = np.concatenate([n_child, n_child]) / 4.0
    moments = GaussianMoments(np.zeros(2 * len(children)), np.diag(variances))
    return NetworkState(
        modes=tuple(children),
        moments=moments,
        contrast=state.contrast,
        elapsed_time=state.elapsed_time,
        frame_phase=state.frame_phase,
    )


def axis_rotation_matrix(axis_phase: float, area: float) -> np.ndarray:
    """3x3 rotation by ``area`` about the equatorial axis (cos phi, sin phi, 0)."""
    n = np.array([math.cos(axis_phase), math.sin(axis_phase), 0.0])
    k = np.array([[0.0, -n[2], n[1]], [n[2], 0.0, -n[0]], [-n[1], n[0], 0.0]])
    return math.cos(area) * np.eye(3) + math.sin(area) * k + (1.0 - math.cos(area)) * np.outer(n, n)


def quadrature_map(state: NetworkState, rotation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linearised action of a common 3D rotation on the (Jz, Jy) moments.

    Returns the 2M x 2M transfer matrix and the mean offset generated by the
    rotation of each mode's nominal spin vector ``s * C * N / 2 * x``.
    """
    m = state.n_modes
    eye = np.eye(m)
    # rows/cols of the rotation: 0 = x, 1 = y, 2 = z
    transfer = np.block(
        [
            [rotation[2, 2] * eye, rotation[2, 1] * eye],
            [rotation[1, 2] * eye, rotation[1, 1] * eye],
        ]
    )
    lever = state.orientation_signs * state.spin_lengths
    offset = np.concatenate([lever * rotation[2, 0], lever * rotation[1, 0]])
    return transfer, offset


def rotate(
    state: NetworkState,
    axis_phase: float,
    area: float,
    lo_noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> NetworkState:
    """Apply one microwave (or Raman) pulse to every mode at once.

    A single phase error drawn from N(0, lo_noise_std^2) tilts the pulse axis
    for all modes alike.  Anti-parallel modes therefore pick up opposite
    mean shifts from it while their fluctuations transform identically.
    """
    if not 0.0 <= area <= 2.0 * math.pi + 1e-12:
        raise InvalidConfigError(f"pulse area must lie in [0, 2pi], got {area}")
    if lo_noise_std < 0:
        raise InvalidConfigError(f"lo_noise_std must be non-negative, got {lo_noise_std}")
    error = 0.0
    if rng is not None:
        # draw unconditionally so noise scans share random numbers
        error = lo_noise_std * float(rng.standard_normal())
    elif lo_noise_std > 0:
        raise InvalidConfigError("lo_noise_std > 0 requires a random stream")
    transfer, offset = quadrature_map(state, axis_rotation_matrix(axis_phase + error, area))
    mean = transfer @ state.moments.mean + offset
    cov = transfer @ state.moments.covariance @ transfer.T
    out = _with_moments(state, mean, cov)
    _check_small_angles(out)
    return out


def accumulate_phase(state: NetworkState, per_mode_detuning, duration: float) -> NetworkState:
    """Free precession about z: mode m turns by detuning[m] * duration.

    The turn moves the mean spin sideways by ``s * C * N / 2 * angle`` in Jy;
    fluctuations are unchanged to first order.
    """
    if duration < 0:
        raise InvalidConfigError(f"duration must be non-negative, got {duration}")
    detuning = np.broadcast_to(np.asarray(per_mode_detuning, dtype=float), (state.n_modes,))
    angles = detuning * duration
    mean = state.moments.mean.copy()
    mean[state.n_modes :] += state.orientation_signs * state.spin_lengths * angles
    out = replace(
        state,
        moments=GaussianMoments(mean, state.moments.covariance),
        elapsed_time=state.elapsed_time + duration,
    )
    _check_small_angles(out)
    return out


def advance_time(state: NetworkState, duration: float) -> NetworkState:
    return replace(state, elapsed_time=state.elapsed_time + duration)
