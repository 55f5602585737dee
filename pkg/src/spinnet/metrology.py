"""Closed-form network metrology and the statistical estimators built on it."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import constants as sc
from scipy import integrate, optimize, stats

from .errors import InvalidConfigError, NumericalStateError

ONE_SIGMA = 0.6826894921370859


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = sc.hbar
    h: float = sc.h
    k_B: float = sc.k
    m_Rb: float = 86.909180531 * sc.atomic_mass
    lambda_raman: float = 780e-9

    def __post_init__(self):
        for name in ("hbar", "h", "k_B", "m_Rb", "lambda_raman"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"physical constant {name} must be positive")

    @property
    def k_mag(self) -> float:
        """Single-photon wavevector magnitude 2*pi/lambda."""
        return 2.0 * math.pi / self.lambda_raman


CONSTANTS = PhysicalConstants()


def _check_network(M, N, C) -> None:
    if int(M) != M or M < 1:
        raise InvalidConfigError(f"mode count M must be a positive integer, got {M}")
    if not np.all(np.asarray(N) > 0):
        raise InvalidConfigError(f"atom number N must be positive, got {N}")
    if not 0.0 < C <= 1.0:
        raise InvalidConfigError(f"contrast C must lie in (0, 1], got {C}")


# -- the network estimator ---------------------------------------------------


def theta_bar(delta_jz_sum, M: int, N: float, C: float):
    """Mean polar-angle shift over M modes from the collective Jz shift."""
    _check_network(M, N, C)
    return np.asarray(delta_jz_sum, dtype=float) / (C * M * N / 2.0) if np.ndim(delta_jz_sum) else (
        float(delta_jz_sum) / (C * M * N / 2.0)
    )


def expected_collective_signal(theta, M: int, N: float, C: float):
    """<dJz> = C * (N/2) * M * theta."""
    _check_network(M, N, C)
    return C * (N / 2.0) * M * np.asarray(theta, dtype=float) if np.ndim(theta) else C * (N / 2.0) * M * theta


def _trials(samples, minimum: int = 2) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < minimum:
        raise InvalidConfigError(f"need at least {minimum} trials, got {x.size}")
    return x


def to_db(ratio: float) -> float:
    if ratio <= 0:
        return -math.inf
    return 10.0 * math.log10(ratio)


def from_db(value: float) -> float:
    return 10.0 ** (value / 10.0)


def xi_net_ratio(trial_delta_jz_sums, M: int, N: float, C: float) -> float:
    """Linear network squeezing parameter Var(sum dJz) / (C^2 M N / 4)."""
    _check_network(M, N, C)
    x = _trials(trial_delta_jz_sums)
    return float(np.var(x, ddof=1)) / (C * C * M * N / 4.0)


def xi_net(trial_delta_jz_sums, M: int, N: float, C: float) -> float:
    """Network squeezing parameter in dB; negative means better than coherent states."""
    ratio = xi_net_ratio(trial_delta_jz_sums, M, N, C)
    if ratio == 0.0:
        warnings.warn("all trials identical; squeezing parameter is -inf", RuntimeWarning, stacklevel=2)
        return -math.inf
    return to_db(ratio)


def xi_net_from_theta(theta_samples, M: int, N: float) -> float:
    """Same quantity through the identity xi^2 = M N Var(theta_bar), in dB."""
    x = _trials(theta_samples)
    return to_db(M * N * float(np.var(x, ddof=1)))


def squeezing_matrix(per_mode_samples, N, C: float) -> tuple[np.ndarray, float]:
    """Mode-pair covariance normalised to the coherent-state level.

    ``per_mode_samples`` is a trials x M array of per-mode Jz shifts.  Returns
    the M x M matrix and the linear network parameter M n^T Xi^2 n for the
    uniform weights n = 1/M.  For equal populations the latter must coincide
    with ``xi_net_ratio`` of the row sums; a mismatch raises.
    """
    x = np.asarray(per_mode_samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidConfigError(f"per-mode samples must be trials x M with >= 2 trials, got {x.shape}")
    m = x.shape[1]
    n_atoms = np.broadcast_to(np.asarray(N, dtype=float), (m,))
    if not np.all(n_atoms > 0) or not 0 < C <= 1:
        raise InvalidConfigError("atom numbers must be positive and contrast in (0, 1]")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    xi2, linear = squeezing_matrix_from_covariance(cov, n_atoms, C)
    if np.allclose(n_atoms, n_atoms[0], rtol=1e-12, atol=0):
        direct = xi_net_ratio(x.sum(axis=1), m, float(n_atoms[0]), C)
        # the contraction cancels large per-mode terms; compare on their scale
        scale = float(np.trace(xi2))
        if not math.isclose(linear, direct, rel_tol=1e-9, abs_tol=1e-9 * scale):
            raise NumericalStateError(f"squeezing-matrix contraction {linear} != xi_net {direct}")
    return xi2, linear


def squeezing_matrix_from_covariance(cov, N, C: float) -> tuple[np.ndarray, float]:
    """Normalise a per-mode Jz covariance; returns (Xi^2, M n^T Xi^2 n)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    m = cov.shape[0]
    n_atoms = np.broadcast_to(np.asarray(N, dtype=float), (m,))
    lengths = C * n_atoms / 2.0
    root_n = np.sqrt(n_atoms)
    xi2 = np.outer(root_n, root_n) * cov / np.outer(lengths, lengths)
    weights = np.full(m, 1.0 / m)
    return xi2, float(m * weights @ xi2 @ weights)


def sensitivity(trial_delta_jz_sums, M: int, N: float, C: float) -> float:
    """Error-propagated phase sensitivity, equal to the std of theta_bar."""
    _check_network(M, N, C)
    x = _trials(trial_delta_jz_sums)
    return float(np.std(x, ddof=1)) / (C * M * N / 2.0)


def qpn_limit(M: int, N: float, C: float) -> float:
    """Coherent-state sensitivity 1/(C sqrt(M N))."""
    _check_network(M, N, C)
    return 1.0 / (C * math.sqrt(M * N))


# -- variance statistics ------------------------------------------------------


def variance_ci(samples, level: float = ONE_SIGMA) -> tuple[float, float]:
    """Chi-squared confidence interval for the population variance."""
    x = _trials(samples)
    dof = x.size - 1
    s2 = float(np.var(x, ddof=1))
    lo_q, hi_q = stats.chi2.ppf([(1 + level) / 2, (1 - level) / 2], dof)
    return dof * s2 / lo_q, dof * s2 / hi_q


def variance_standard_error(variance: float, n: int) -> float:
    """Standard error of an unbiased sample variance for Gaussian data."""
    return variance * math.sqrt(2.0 / (n - 1))


def pooled_variance(sets: Sequence[Sequence[float]]) -> float:
    """sum((n_i - 1) s_i^2) / sum(n_i - 1) over sets."""
    num = 0.0
    den = 0
    for s in sets:
        x = _trials(s)
        num += (x.size - 1) * float(np.var(x, ddof=1))
        den += x.size - 1
    return num / den


# -- interferometer phase ----------------------------------------------------


def interferometer_scale_factor(k_mag: float, T_int: float, T_0: float, tau_0: float, tau_k: float) -> float:
    """Phase per unit acceleration (rad per m/s^2) including finite pulse lengths."""
    for name, value in (("T_int", T_int), ("T_0", T_0), ("tau_0", tau_0), ("tau_k", tau_k)):
        if value < 0:
            raise InvalidConfigError(f"{name} must be non-negative, got {value}")
    bracket = (
        2 * T_int**2
        + 4 * T_int * T_0
        + 4 * T_int * tau_0
        + 6 * T_int * tau_k
        + 4 * T_0 * tau_k
        + 4 * tau_0 * tau_k
        + 4 * tau_k**2
    )
    return 2.0 * k_mag * bracket


def interferometer_phase(a, k_mag: float, T_int: float, T_0: float, tau_0: float, tau_k: float):
    """Per-mode phase from per-mode accelerations projected on k."""
    scale = interferometer_scale_factor(k_mag, T_int, T_0, tau_0, tau_k)
    return scale * np.asarray(a, dtype=float) if np.ndim(a) else scale * float(a)


def acceleration_sensitivity(delta_theta: float, k_mag: float, T_int: float, T_0: float, tau_0: float, tau_k: float) -> float:
    return delta_theta / interferometer_scale_factor(k_mag, T_int, T_0, tau_0, tau_k)


def _branch_momenta(events) -> list[tuple[float, float, float, float]]:
    """Walk the pulse list tracking both interferometer branches.

    Returns (start, end, k_before, k_after) for every Raman pulse, where k is
    the relative momentum between the branches in units of |k|.
    """
    spin = {"a": 1, "b": -1}  # +1 = up
    mom = {"a": 0, "b": 0}
    steps = []
    for ev in events:
        kind = ev.kind
        if kind == "raman_pi":
            before = mom["b"] - mom["a"]
            for br in ("a", "b"):
                mom[br] += -2 if spin[br] > 0 else 2
                spin[br] = -spin[br]
            steps.append((ev.start_time, ev.start_time + ev.duration, before, mom["b"] - mom["a"]))
        elif kind == "microwave":
            area = ev.extra.get("area", math.pi)
            if math.isclose(area % (2 * math.pi), math.pi, abs_tol=1e-9):
                for br in spin:
                    spin[br] = -spin[br]
    return steps


def sensitivity_function_oracle(timeline, a: float, k_mag: float, n_check: int = 0) -> float:
    """Numerically integrate the response of a Raman pulse timeline to acceleration a.

    The relative momentum of the two branches ramps with the Rabi transfer
    profile sin^2(pi u / 2) during each Raman pulse; integrating it twice gives
    the separation-time area, and the phase is k * a times that area.
    """
    steps = _branch_momenta(timeline.events)
    if not steps:
        raise InvalidConfigError("timeline contains no Raman pulses")
    if steps[-1][3] != 0:
        raise InvalidConfigError("interferometer does not close: branches end with different momenta")
    if a == 0:
        return 0.0
    t0 = steps[0][0]
    t1 = steps[-1][1]
    scale = t1 - t0
    if scale <= 0:
        raise InvalidConfigError("timeline has zero duration")
    # dimensionless time u in [0, 1]
    segs = []
    for start, end, kb, ka in steps:
        segs.append(((start - t0) / scale, (end - t0) / scale, kb, ka))

    def rel_momentum(u: float) -> float:
        k = 0.0
        for s, e, kb, ka in segs:
            if u < s:
                return k
            if u <= e:
                if e == s:
                    return ka
                frac = math.sin(0.5 * math.pi * (u - s) / (e - s)) ** 2
                return kb + (ka - kb) * frac
            k = ka
        return k

    breaks = sorted({0.0, 1.0, *[s for s, *_ in segs], *[e for _, e, *_ in segs]})
    opts = dict(epsabs=0.0, epsrel=1e-13, limit=200)
    area = 0.0
    sep = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        if hi <= lo:
            continue
        start_sep = sep

        def separation(u, lo=lo, start_sep=start_sep):
            return start_sep + integrate.quad(rel_momentum, lo, u, **opts)[0]

        area += integrate.quad(separation, lo, hi, **opts)[0]
        sep = separation(hi)
    return k_mag * a * area * scale * scale


# -- coherence and kinematics -------------------------------------------------


def thermal_wavelength(ensemble_temp: float, consts: PhysicalConstants = CONSTANTS) -> float:
    if not ensemble_temp > 0:
        raise InvalidConfigError(f"ensemble temperature must be positive, got {ensemble_temp}")
    return consts.h / math.sqrt(2.0 * math.pi * consts.m_Rb * consts.k_B * ensemble_temp)


def recoil_velocity(consts: PhysicalConstants = CONSTANTS) -> float:
    """Relative velocity 4 hbar |k| / m of the two Raman-split modes."""
    return 4.0 * consts.hbar * consts.k_mag / consts.m_Rb


def mode_separation(time: float, consts: PhysicalConstants = CONSTANTS) -> float:
    return recoil_velocity(consts) * time


def decay_time_from_wavelength(ensemble_temp: float, consts: PhysicalConstants = CONSTANTS) -> float:
    """Separation time at which the modes have drifted one thermal wavelength apart."""
    return thermal_wavelength(ensemble_temp, consts) / recoil_velocity(consts)


def contrast_vs_separation(
    T,
    ensemble_temp: float,
    consts: PhysicalConstants = CONSTANTS,
    C0: float = 1.0,
    beta: float | None = None,
):
    """Inter-mode coherence C0 exp(-T / beta) after separation time T.

    Without an explicit ``beta`` the decay time is lambda_th / v_rel.
    """
    T_arr = np.asarray(T, dtype=float)
    if np.any(T_arr < 0):
        raise InvalidConfigError("separation time must be non-negative")
    if beta is None:
        beta = decay_time_from_wavelength(ensemble_temp, consts)
    elif not beta > 0:
        raise InvalidConfigError(f"decay time beta must be positive, got {beta}")
    else:
        thermal_wavelength(ensemble_temp, consts)
    out = C0 * np.exp(-T_arr / beta)
    return float(out) if np.ndim(T) == 0 else out


def contrast_budget(transfer_prob: float, n_raman_pulses: int, base_contrast: float) -> float:
    for name, p in (("transfer_prob", transfer_prob), ("base_contrast", base_contrast)):
        if not 0 < p <= 1:
            raise InvalidConfigError(f"{name} must lie in (0, 1], got {p}")
    if n_raman_pulses < 0:
        raise InvalidConfigError("n_raman_pulses must be non-negative")
    return transfer_prob**n_raman_pulses * base_contrast


def clock_shift_from_angle(theta, T_int: float):
    """Average clock frequency shift theta / T_int in rad/s."""
    if not T_int > 0:
        raise InvalidConfigError(f"T_int must be positive, got {T_int}")
    return np.asarray(theta, dtype=float) / T_int if np.ndim(theta) else theta / T_int


# -- fits ---------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianFit:
    mean: float
    std: float
    mean_ci: tuple[float, float]
    std_ci: tuple[float, float]
    n: int


def fit_gaussian(samples, level: float = ONE_SIGMA) -> GaussianFit:
    """Maximum-likelihood normal fit with confidence intervals on both parameters."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 3:
        raise InvalidConfigError("Gaussian fit needs at least 3 samples")
    if np.ptp(x) == 0:
        raise InvalidConfigError("Gaussian fit of constant data is degenerate")
    mu, sd = stats.norm.fit(x)
    n = x.size
    t = stats.t.ppf((1 + level) / 2, n - 1)
    half = t * sd / math.sqrt(n - 1)
    lo, hi = stats.chi2.ppf([(1 + level) / 2, (1 - level) / 2], n - 1)
    return GaussianFit(
        float(mu),
        float(sd),
        (float(mu - half), float(mu + half)),
        (float(sd * math.sqrt(n / lo)), float(sd * math.sqrt(n / hi))),
        n,
    )


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_se: float
    intercept_se: float
    covariance: np.ndarray
    dof: int
    level: float = ONE_SIGMA

    @property
    def _t(self) -> float:
        return float(stats.t.ppf((1 + self.level) / 2, self.dof)) if self.dof > 0 else math.inf

    @property
    def slope_ci(self) -> tuple[float, float]:
        h = self._t * self.slope_se
        return self.slope - h, self.slope + h

    @property
    def intercept_ci(self) -> tuple[float, float]:
        h = self._t * self.intercept_se
        return self.intercept - h, self.intercept + h

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)

    def band(self, x):
        """Half-width of the confidence band of the fitted line at x."""
        x = np.asarray(x, dtype=float)
        var = self.covariance[0, 0] + 2 * x * self.covariance[0, 1] + x * x * self.covariance[1, 1]
        return self._t * np.sqrt(np.clip(var, 0.0, None))


def fit_linear(x, y, sigma=None, level: float = ONE_SIGMA) -> LinearFit:
    """Least-squares line; with ``sigma`` the fit is weighted and uncertainties absolute."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise InvalidConfigError("x and y differ in length")
    if x.size < 3:
        raise InvalidConfigError("linear fit needs at least 3 points")
    if np.ptp(x) == 0:
        raise InvalidConfigError("linear fit with a single x value is degenerate")
    design = np.column_stack([np.ones_like(x), x])
    if sigma is None:
        w = np.ones_like(x)
    else:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape)
        if np.any(sigma <= 0):
            raise InvalidConfigError("sigma must be positive")
        w = 1.0 / sigma**2
    wd = design * w[:, None]
    normal = design.T @ wd
    coef = np.linalg.solve(normal, wd.T @ y)
    resid = y - design @ coef
    dof = x.size - 2
    inv = np.linalg.inv(normal)
    if sigma is None:
        s2 = float(resid @ resid) / dof
        cov = inv * s2
    else:
        cov = inv
    return LinearFit(
        slope=float(coef[1]),
        intercept=float(coef[0]),
        slope_se=float(math.sqrt(cov[1, 1])),
        intercept_se=float(math.sqrt(cov[0, 0])),
        covariance=cov,
        dof=dof,
        level=level,
    )


def fit_power_law(x, y, y_err=None, level: float = ONE_SIGMA) -> LinearFit:
    """Fit y = A x^p on log axes; the returned slope is p, intercept is ln A."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise InvalidConfigError("power-law fit needs positive data")
    sig = None if y_err is None else np.asarray(y_err, dtype=float) / y
    return fit_linear(np.log(x), np.log(y), sigma=sig, level=level)


def fit_exponential_decay(t, c, sigma=None) -> tuple[float, float, np.ndarray]:
    """Fit c = C0 exp(-t / beta); returns (C0, beta, covariance)."""
    t = np.asarray(t, dtype=float)
    c = np.asarray(c, dtype=float)
    guess_beta = max(float(np.ptp(t)) / 3.0, 1e-12)
    popt, pcov = optimize.curve_fit(
        lambda tt, c0, beta: c0 * np.exp(-tt / beta),
        t,
        c,
        p0=(float(c[0]) if c[0] > 0 else 1.0, guess_beta),
        sigma=sigma,
        absolute_sigma=sigma is not None,
        maxfev=20000,
    )
    return float(popt[0]), float(popt[1]), pcov


# -- stability ----------------------------------------------------------------


@dataclass(frozen=True)
class StabilityCurve:
    averaging: np.ndarray
    deviation: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    edf: np.ndarray

    def as_rows(self) -> list[tuple[int, float, float, float]]:
        return [
            (int(n), float(d), float(lo), float(hi))
            for n, d, lo, hi in zip(self.averaging, self.deviation, self.lower, self.upper)
        ]


def _overlapping_edf(n_data: int, m: int) -> float:
    # white-noise edf for the overlapping Allan variance (phase points = data + 1)
    n = n_data + 1
    return (3.0 * (n - 1) / (2.0 * m) - 2.0 * (n - 2) / n) * 4.0 * m * m / (4.0 * m * m + 5.0)


def fractional_stability(trials, averaging=None, level: float = ONE_SIGMA) -> StabilityCurve:
    """Overlapping Allan deviation of a sequence of single-shot estimates.

    The value at averaging number n is the deviation of n-shot means; for
    white noise of std s it equals s / sqrt(n).  Confidence intervals come
    from chi-squared quantiles with the white-noise equivalent dof.
    """
    y = np.asarray(trials, dtype=float).ravel()
    if y.size < 8:
        raise InvalidConfigError(f"stability analysis needs at least 8 trials, got {y.size}")
    if averaging is None:
        averaging = 2 ** np.arange(int(math.log2(y.size // 4)) + 1)
    averaging = np.asarray(averaging, dtype=int)
    if np.any(averaging < 1) or np.any(2 * averaging > y.size):
        raise InvalidConfigError("averaging numbers must satisfy 1 <= n <= len/2")
    csum = np.concatenate([[0.0], np.cumsum(y)])
    dev = np.empty(averaging.size)
    edf = np.empty(averaging.size)
    for i, m in enumerate(averaging):
        means = (csum[m:] - csum[:-m]) / m
        diffs = means[m:] - means[:-m]
        dev[i] = math.sqrt(0.5 * float(np.mean(diffs * diffs)))
        edf[i] = max(_overlapping_edf(y.size, int(m)), 1.0)
    q_hi = stats.chi2.ppf((1 + level) / 2, edf)
    q_lo = stats.chi2.ppf((1 - level) / 2, edf)
    return StabilityCurve(
        averaging=averaging,
        deviation=dev,
        lower=dev * np.sqrt(edf / q_hi),
        upper=dev * np.sqrt(edf / q_lo),
        edf=edf,
    )


# -- summaries ----------------------------------------------------------------


@dataclass
class StatsSummary:
    n_trials: int
    mean_theta: float
    var_theta: float
    var_theta_ci: tuple[float, float]
    mean_delta_jz: float
    var_delta_jz: float
    xi_net_db: float
    sensitivity: float
    squeezing_matrix: np.ndarray | None = None
    fits: dict = field(default_factory=dict)
    stability: StabilityCurve | None = None

    @property
    def std_theta(self) -> float:
        return math.sqrt(self.var_theta)

    @property
    def sem_theta(self) -> float:
        return math.sqrt(self.var_theta / self.n_trials)

    def to_dict(self) -> dict:
        out = {
            "n_trials": self.n_trials,
            "mean_theta_rad": self.mean_theta,
            "var_theta_rad2": self.var_theta,
            "var_theta_ci_rad2": list(self.var_theta_ci),
            "std_theta_rad": self.std_theta,
            "sem_theta_rad": self.sem_theta,
            "mean_delta_jz_spins": self.mean_delta_jz,
            "var_delta_jz_spins2": self.var_delta_jz,
            "xi_net_db": self.xi_net_db,
            "improvement_db": -self.xi_net_db,
            "sensitivity_rad": self.sensitivity,
        }
        if self.squeezing_matrix is not None:
            out["squeezing_matrix"] = np.asarray(self.squeezing_matrix).tolist()
        if self.fits:
            out["fits"] = self.fits
        if self.stability is not None:
            out["stability"] = [
                {"n": n, "deviation_rad": d, "lower_rad": lo, "upper_rad": hi}
                for n, d, lo, hi in self.stability.as_rows()
            ]
        return out


def summarize(delta_jz, M: int, N: float, C: float, per_mode=None) -> StatsSummary:
    """Statistics of one block of trials (theta_bar derived from delta_jz)."""
    d = _trials(delta_jz)
    th = theta_bar(d, M, N, C)
    var_t = float(np.var(th, ddof=1))
    xi2 = None
    if per_mode is not None:
        pm = np.asarray(per_mode, dtype=float)
        if pm.ndim == 2 and pm.shape[1] == M:
            xi2, _ = squeezing_matrix(pm, N, C)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        xi_db = xi_net(d, M, N, C)
    return StatsSummary(
        n_trials=int(d.size),
        mean_theta=float(np.mean(th)),
        var_theta=var_t,
        var_theta_ci=variance_ci(th),
        mean_delta_jz=float(np.mean(d)),
        var_delta_jz=float(np.var(d, ddof=1)),
        xi_net_db=xi_db,
        sensitivity=sensitivity(d, M, N, C),
        squeezing_matrix=xi2,
    )
