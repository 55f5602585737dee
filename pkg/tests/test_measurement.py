import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinnet.errors import InvalidConfigError, NumericalStateError
from spinnet.measurement import QndConfig, fluorescence_readout, qnd_measure, qnd_update
from spinnet.network import GaussianMoments, ModeState, NetworkState, init_css, split_network


def two_mode(n=90000, c=0.78):
    return split_network(init_css(n, c))


def test_config_validation():
    for bad in (dict(resolution_std=0.0), dict(resolution_std=-1.0), dict(backaction_mode="loud"),
                dict(contrast_cost=1.0), dict(backaction_variance=-1.0)):
        with pytest.raises(InvalidConfigError):
            QndConfig(**bad)


def test_uninformative_probe_leaves_covariance():
    s = two_mode()
    t, y = qnd_measure(s, QndConfig(), np.random.default_rng(1))
    assert math.isnan(y)
    assert np.allclose(t.moments.covariance, s.moments.covariance, rtol=1e-9, atol=0)


def test_half_variance_when_noise_matches_prior():
    n = 45000
    s = init_css(n, 1.0)
    t, _ = qnd_measure(s, QndConfig(resolution_std=math.sqrt(n / 4)), np.random.default_rng(2))
    assert math.isclose(t.jz_covariance[0, 0], n / 8, rel_tol=1e-12)


def test_backaction_saturates_uncertainty_product():
    s = init_css(45000, 0.78)
    t, _ = qnd_measure(s, QndConfig(resolution_std=20.0), np.random.default_rng(3))
    blk = t.mode_block(0)
    det = blk[0, 0] * blk[1, 1] - blk[0, 1] ** 2
    assert math.isclose(det, t.heisenberg_bounds()[0], rel_tol=1e-9)
    t.check()


def test_explicit_backaction_adds_variance():
    s = init_css(45000, 1.0)
    cfg = QndConfig(resolution_std=1e6, backaction_mode="explicit", backaction_variance=500.0)
    t, _ = qnd_measure(s, cfg, np.random.default_rng(3))
    assert math.isclose(t.jy_covariance[0, 0], 45000 / 4 + 500.0, rel_tol=1e-9)


def test_contrast_cost_and_stark_bookkeeping():
    s = init_css(45000, 0.8)
    t, _ = qnd_measure(s, QndConfig(resolution_std=30.0, contrast_cost=0.1, ac_stark_shift=1.0), np.random.default_rng(0))
    assert math.isclose(t.contrast, 0.72)
    assert t.frame_phase == 1.0


def test_entanglement_witness():
    s = two_mode()
    t, _ = qnd_measure(s, QndConfig(resolution_std=30.0), np.random.default_rng(4))
    cov = t.jz_covariance
    assert cov[0, 1] < 0
    conditional = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
    assert conditional < cov[0, 0]


def test_rejects_non_psd_input():
    mode = ModeState(0, 1000.0)
    bad = NetworkState((mode,), GaussianMoments(np.zeros(2), np.array([[250.0, 400.0], [400.0, 250.0]])), 1.0)
    with pytest.raises(NumericalStateError):
        qnd_measure(bad, QndConfig(resolution_std=10.0), np.random.default_rng(0))


# probe noise from a tenth of to a hundred times the prior std; far outside that
# range the covariance subtraction loses digits in proportion to prior / sigma_r^2
@settings(max_examples=200, deadline=None)
@given(st.floats(1e2, 1e6), st.floats(-1.0, 2.0), st.booleans())
def test_kalman_identity(prior_atoms, log_ratio, split):
    s = init_css(prior_atoms, 0.9)
    if split:
        s = split_network(s)
    prior = s.sum_jz_variance
    sigma_r = math.sqrt(prior) * 10.0**log_ratio
    t, _ = qnd_measure(s, QndConfig(resolution_std=sigma_r), np.random.default_rng(0))
    expected = 1.0 / (1.0 / prior + 1.0 / sigma_r**2)
    assert math.isclose(t.sum_jz_variance, expected, rel_tol=1e-12)
    assert t.sum_jz_variance <= prior
    t.moments.check()


def test_fluorescence_of_deterministic_state():
    mode = ModeState(0, 1000.0)
    # zero Jz variance with a huge Jy variance keeps the product legal
    s = NetworkState((mode,), GaussianMoments(np.array([12.5, 0.0]), np.diag([0.0, 1e12])), 1.0)
    assert fluorescence_readout(s, 0.0, np.random.default_rng(0)) == 12.5


def test_fluorescence_qpn_std():
    s = init_css(45000, 0.78)
    rng = np.random.default_rng(5)
    y = np.array([fluorescence_readout(s, 0.0, rng) for _ in range(10000)])
    sd = y.std(ddof=1)
    assert abs(sd - math.sqrt(45000) / 2) < 3 * sd / math.sqrt(2 * (y.size - 1))


def test_repeated_probes_correlate_as_kalman_predicts():
    n, sigma = 45000.0, 60.0
    prior = n / 4
    s = init_css(n, 0.78)
    cfg = QndConfig(resolution_std=sigma)
    rng = np.random.default_rng(8)
    first, second = [], []
    for _ in range(10000):
        t, y1, _ = qnd_update(s, cfg, rng)
        _, y2, _ = qnd_update(t, cfg, rng)
        first.append(y1)
        second.append(y2)
    first, second = np.array(first), np.array(second)
    rho = np.corrcoef(first, second)[0, 1]
    expected_rho = prior / (prior + sigma**2)
    # Fisher-z standard error
    assert abs(np.arctanh(rho) - np.arctanh(expected_rho)) < 3 / math.sqrt(first.size - 3)
    post = 1 / (1 / prior + 1 / sigma**2)
    d = second - first * prior / (prior + sigma**2)
    expected = post + sigma**2
    assert abs(d.var(ddof=1) - expected) < 3 * expected * math.sqrt(2 / (d.size - 1))
