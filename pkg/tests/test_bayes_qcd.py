import numpy as np
import pytest

from fdiqcd.bayes_qcd import (
    BayesDetectorState,
    BayesNodeModel,
    decide,
    first_crossing,
    lambda_to_pi,
    log_lambda_trace,
    onset_log_weights,
    pi_trace,
    step_log_lambda,
    update_lambda,
)
from fdiqcd.kcif import compute_gain_schedule
from fdiqcd.validation import check_lambda_batch, simulate_estimates

SIGMA = 3.0 * np.eye(2)


@pytest.fixture(scope="module")
def short_schedule(ref_model):
    return compute_gain_schedule(ref_model, 20)


@pytest.fixture(scope="module")
def node0(ref_model, short_schedule):
    return BayesNodeModel(ref_model, short_schedule, 0, SIGMA, 0.05, onset_window=8)


# -- recursion ---------------------------------------------------------------


def test_step_matches_closed_form():
    lam, ratio, rho = np.array([0.0, 0.3, 2.0]), np.array([1.5, 0.2, 4.0]), 0.1
    with np.errstate(divide="ignore"):
        got = np.exp(step_log_lambda(np.log(lam), np.log(ratio), rho))
    np.testing.assert_allclose(got, (lam + rho) / (1 - rho) * ratio, rtol=1e-14)


def test_unit_ratio_gives_prior_odds():
    rho = 0.5
    st = update_lambda(BayesDetectorState.initial(3, 0.9, rho), np.zeros(3))
    np.testing.assert_allclose(st.lambdas, 1.0)
    assert st.pi == pytest.approx(0.5)
    # with ratio 1 the odds follow the prior: lambda(t) = P(tau <= t) / P(tau > t)
    rho, lr = 0.05, np.zeros((11, 1))
    lam = np.exp(log_lambda_trace(lr, rho))[:, 0]
    t = np.arange(11)
    np.testing.assert_allclose(lam, (1 - (1 - rho) ** t) / (1 - rho) ** t, rtol=1e-12)


def test_zero_sigma_ratio_is_one(ref_model, short_schedule, rng):
    bm = BayesNodeModel(ref_model, short_schedule, 0, np.zeros((2, 2)), 0.5, onset_window=4)
    _, xhat, y = simulate_estimates(ref_model, short_schedule, 3, 20, rng)
    lr = bm.log_ratio_trace(xhat, y)
    np.testing.assert_allclose(lr, 0.0, atol=1e-9)
    st = update_lambda(BayesDetectorState.initial(5, 0.9, 0.5), lr[0, 1])
    assert st.pi == pytest.approx(0.5, abs=1e-9)


def test_recursion_matches_batch_formula():
    res = check_lambda_batch(seed=0)
    assert res.passed, res.detail


def test_streaming_equals_vectorised(node0, ref_model, short_schedule, rng):
    _, xhat, y = simulate_estimates(ref_model, short_schedule, 1, 20, rng, (1, 6, SIGMA))
    lr = node0.log_ratio_trace(xhat, y)[0]
    trace = log_lambda_trace(lr, 0.05)
    st = BayesDetectorState.initial(5, 1.1, 0.05)
    for t in range(1, 21):
        st = update_lambda(st, lr[t])
        np.testing.assert_allclose(st.log_lambda, trace[t], rtol=1e-12)
        assert st.t == t


def test_nan_ratio_uses_floor(caplog):
    st = BayesDetectorState.initial(2, 0.9, 0.1)
    a = update_lambda(st, [np.nan, 0.0])
    b = update_lambda(st, [-690.0, 0.0])
    np.testing.assert_array_equal(a.log_lambda, b.log_lambda)
    with pytest.raises(ValueError):
        update_lambda(st, [0.0])


def test_state_validation():
    with pytest.raises(ValueError):
        BayesDetectorState.initial(2, 0.9, 0.0)
    with pytest.raises(ValueError):
        BayesDetectorState.initial(2, 0.9, 1.0)


# -- decision ----------------------------------------------------------------


def test_lambda_to_pi_examples():
    assert lambda_to_pi([0.0, 1.0, 3.0]) == (0.75, 2)
    assert lambda_to_pi([2.0, 2.0]) == (pytest.approx(2 / 3), 0)
    assert lambda_to_pi([0.0, np.inf]) == (1.0, 1)
    assert lambda_to_pi([0.0, 0.0]) == (0.0, 0)
    with pytest.raises(ValueError):
        lambda_to_pi([-1.0])


def test_pi_monotone_in_lambda():
    lam = np.linspace(0, 50, 200)
    pis = [lambda_to_pi([v])[0] for v in lam]
    assert np.all(np.diff(pis) > 0)
    p, best = pi_trace(np.log(np.array([[0.5, 3.0], [4.0, 1.0]])))
    np.testing.assert_allclose(p, [0.75, 0.8])
    np.testing.assert_array_equal(best, [1, 0])


def test_decide():
    st = BayesDetectorState(np.log([0.2, 1.0]), 0.5, 0.1, t=7)
    out = decide(st)
    assert out.stopped_at == 7 and out.identified == 1
    assert decide(BayesDetectorState(np.log([0.2, 0.9]), 0.5, 0.1)).stopped_at is None
    with pytest.raises(ValueError):
        decide(out)
    # a stopped detector ignores further data
    assert update_lambda(out, [5.0, 5.0]) is out


def test_threshold_one_never_stops():
    st = BayesDetectorState.initial(2, 1.0, 0.2)
    for _ in range(50):
        st = decide(update_lambda(st, [20.0, 20.0]))
    assert not st.stopped


def test_first_crossing():
    stat = np.array([[9.0, 0.1, 0.6, 0.4, 0.9], [9.0, 0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(first_crossing(stat, 0.5), [2, -1])
    np.testing.assert_array_equal(first_crossing(stat, [0.95, 0.0]), [-1, 1])
    np.testing.assert_array_equal(first_crossing(stat, 0.5, start=3), [4, -1])


# -- onset prior -------------------------------------------------------------


@pytest.mark.parametrize("n_ages", [1, 4, 30])
def test_onset_weights_normalised(n_ages):
    lw = onset_log_weights(25, 0.07, n_ages)
    assert np.all(np.isneginf(lw[0]))
    with np.errstate(divide="ignore"):
        tot = np.log(np.exp(lw[1:]).sum(axis=1))
    np.testing.assert_allclose(tot, 0.0, atol=1e-12)


def test_onset_weights_values():
    rho, q = 0.1, 0.9
    lw = np.exp(onset_log_weights(5, rho, 10))
    # P(tau = 5 - a | tau <= 5) = rho q^(4-a) / (1 - q^5)
    expected = [rho * q ** (4 - a) / (1 - q**5) for a in range(5)]
    np.testing.assert_allclose(lw[5, :5], expected, rtol=1e-12)
    assert not lw[5, 5:].any()


# -- statistical behaviour ------------------------------------------------------


def test_log_ratio_drift(node0, ref_model, short_schedule):
    n = 500
    _, xc, yc = simulate_estimates(ref_model, short_schedule, n, 20, np.random.default_rng(3))
    _, xa, ya = simulate_estimates(ref_model, short_schedule, n, 20, np.random.default_rng(4), (1, 1, SIGMA))
    clean = node0.log_ratio_trace(xc, yc)[:, 5:, 1]
    att = node0.log_ratio_trace(xa, ya)[:, 5:, 1]
    assert att.mean() > 0.5
    assert clean.mean() < 0
    # correct hypothesis gathers the most evidence
    lam = log_lambda_trace(node0.log_ratio_trace(xa, ya), 0.05)[:, -1]
    assert np.mean(np.argmax(lam, axis=-1) == 1) > 0.8
