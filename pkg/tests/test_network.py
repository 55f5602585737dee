import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinnet.errors import GaussianValidityWarning, InvalidConfigError, InvalidStateError, NumericalStateError, SmallAngleError
from spinnet.network import (
    GaussianMoments,
    ModeState,
    NetworkState,
    accumulate_phase,
    check_covariance,
    init_css,
    rotate,
    split_network,
)


def test_css_variances():
    s = init_css(45000, 0.78)
    assert s.jz_covariance[0, 0] == 11250
    assert s.jy_covariance[0, 0] == 11250
    assert s.moments.covariance[0, 1] == 0
    assert s.modes[0].momentum_index == 0 and s.modes[0].orientation_sign == 1


def test_tiny_css_warns():
    with pytest.warns(GaussianValidityWarning):
        s = init_css(4, 1.0)
    assert s.jz_covariance[0, 0] == 1.0


@pytest.mark.parametrize("n,c", [(0, 0.5), (-3, 0.5), (1000, 0.0), (1000, 1.2)])
def test_css_rejects_bad_input(n, c):
    with pytest.raises(InvalidConfigError):
        init_css(n, c)


def test_split_radius_and_signs():
    s = split_network(init_css(80000, 1.0))
    assert list(s.atom_numbers) == [40000, 40000]
    assert list(s.spin_lengths) == [20000, 20000]
    assert list(s.orientation_signs) == [1, -1]
    assert [m.momentum_index for m in s.modes] == [1, -1]
    assert np.allclose(s.jz_covariance, np.eye(2) * 10000)


def test_split_to_four_modes_keeps_atoms():
    s = split_network(split_network(init_css(180000, 0.78)))
    assert s.n_modes == 4
    assert np.all(s.atom_numbers == 45000)
    assert s.total_atoms == 180000


def test_split_conserves_small_network():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GaussianValidityWarning)
        s = split_network(init_css(4, 1.0))
    assert s.total_atoms == 4 and list(s.atom_numbers) == [2, 2]


def test_split_partition_noise_conserves_total():
    rng = np.random.default_rng(3)
    s = split_network(init_css(90001, 0.9), partition_noise=True, rng=rng)
    assert s.total_atoms == 90001
    assert s.atom_numbers[0] != s.atom_numbers[1]


def test_split_needs_separable_state():
    from spinnet.measurement import QndConfig, qnd_measure

    s = split_network(init_css(90000, 0.8))
    s, _ = qnd_measure(s, QndConfig(resolution_std=30.0), np.random.default_rng(0))
    with pytest.raises(InvalidStateError):
        split_network(s)


def test_double_half_pulse_negates_mean():
    s = init_css(45000, 1.0)
    # precess, then turn the azimuthal offset into a polar one
    s = rotate(accumulate_phase(s, 30.0, 100e-6), 0.0, math.pi / 2)
    z0 = s.jz_mean.copy()
    assert abs(z0[0]) > 1.0
    var0 = s.jz_covariance[0, 0]
    t = rotate(rotate(s, 0.0, math.pi / 2), 0.0, math.pi / 2)
    assert np.allclose(t.jz_mean, -z0, rtol=1e-12)
    assert math.isclose(t.jz_covariance[0, 0], var0, rel_tol=1e-12)
    assert np.allclose(t.moments.mean, rotate(s, 0.0, math.pi).moments.mean, rtol=1e-12)


def test_common_phase_offset_antisymmetric():
    s = split_network(init_css(90000, 0.78))
    for phi in (1e-3, 5e-3, 10e-3):
        t = rotate(rotate(s, 0.0, math.pi / 2), phi, math.pi / 2)
        th = t.mean_polar_angles
        assert abs(th[0] + th[1]) <= 1e-12
        assert math.isclose(abs(th[0]), phi, rel_tol=phi)


def test_accumulate_zero_is_identity():
    s = split_network(init_css(90000, 0.78))
    t = accumulate_phase(s, 0.0, 1e-3)
    assert np.array_equal(t.moments.mean, s.moments.mean)
    assert np.array_equal(t.moments.covariance, s.moments.covariance)


def test_accumulate_then_pulse_gives_polar_shift():
    s = split_network(init_css(90000, 0.78))
    w = 15.0
    t = accumulate_phase(s, s.orientation_signs * w, 110e-6)
    t = rotate(t, 0.0, math.pi / 2)
    assert np.allclose(t.mean_polar_angles, w * 110e-6, rtol=1e-12)


def test_small_angle_violation():
    s = init_css(45000, 1.0)
    with pytest.raises(SmallAngleError):
        rotate(s, 0.35, math.pi / 2)
    with pytest.raises(SmallAngleError):
        accumulate_phase(s, 1000.0, 1e-3)


def test_lo_noise_needs_stream():
    with pytest.raises(InvalidConfigError):
        rotate(init_css(1000, 1.0), 0.0, 1.0, lo_noise_std=0.01)


def test_bad_covariance_detected():
    with pytest.raises(NumericalStateError):
        check_covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NumericalStateError):
        check_covariance(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_heisenberg_violation_detected():
    mode = ModeState(0, 1000.0)
    state = NetworkState((mode,), GaussianMoments(np.zeros(2), np.diag([10.0, 10.0])), 1.0)
    with pytest.raises(NumericalStateError):
        state.check()


def test_mode_needs_atoms_and_sign():
    with pytest.raises(InvalidStateError):
        ModeState(0, 0.0)
    with pytest.raises(InvalidStateError):
        ModeState(0, 10.0, orientation_sign=0)


def test_moments_are_read_only_copies():
    mean = np.zeros(2)
    g = GaussianMoments(mean, np.eye(2))
    mean[0] = 5.0
    assert g.mean[0] == 0.0
    with pytest.raises(ValueError):
        g.mean[0] = 1.0


# nominal pulse axes are +-x; axis offsets break both identities at second order
_pulse = st.tuples(st.sampled_from([0.0, math.pi]), st.just(0.0), st.floats(0.0, 2 * math.pi))


@settings(max_examples=60, deadline=None)
@given(st.lists(_pulse, min_size=1, max_size=8), st.sampled_from([1, 2, 4]))
def test_rotation_preserves_per_mode_variance_sum(pulses, m):
    s = init_css(m * 50000, 0.9)
    while s.n_modes < m:
        s = split_network(s)
    totals = np.diag(s.jz_covariance) + np.diag(s.jy_covariance)
    for base, offset, area in pulses:
        s = rotate(s, base + offset * 0.1, area)
        now = np.diag(s.jz_covariance) + np.diag(s.jy_covariance)
        assert np.allclose(now, totals, rtol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.lists(_pulse, min_size=1, max_size=6))
def test_closed_sequence_restores_mean(pulses):
    s = split_network(init_css(90000, 0.78))
    s = accumulate_phase(s, s.orientation_signs * 20.0, 100e-6)
    start = s.moments.mean.copy()
    for base, offset, area in pulses:
        s = rotate(s, base + offset * 0.1, area)
    for base, offset, area in reversed(pulses):
        s = rotate(s, base + offset * 0.1 + math.pi, area)
    assert np.allclose(s.moments.mean, start, atol=1e-12 * 45000, rtol=0)


def test_axis_offset_breaks_variance_sum_only_at_second_order():
    s = init_css(50000, 0.9)
    total = s.jz_covariance[0, 0] + s.jy_covariance[0, 0]
    for phi in (1e-3, 1e-2):
        t = rotate(s, phi, math.pi / 2)
        drift = abs(t.jz_covariance[0, 0] + t.jy_covariance[0, 0] - total) / total
        assert drift < 2 * phi**2
