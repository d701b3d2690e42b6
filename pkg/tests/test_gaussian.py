import logging

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from fdiqcd.gaussian import (
    ConditionalGaussian,
    condition_blocks,
    condition_joint,
    gaussian_logpdf,
    is_psd,
    psd_leq,
    sample_gaussian,
    spd_solve,
    whitening,
)
from fdiqcd.validation import schur_condition


def random_spd(rng, n, floor=0.1):
    m = rng.standard_normal((n, n))
    return m @ m.T + floor * np.eye(n)


def test_condition_joint_matches_schur(rng):
    for _ in range(20):
        cov = random_spd(rng, 7)
        tgt, cond = np.array([0, 3]), np.array([1, 2, 5, 6])
        g, c = condition_joint(cov, tgt, cond)
        g_ref, c_ref = schur_condition(cov, tgt, cond)
        np.testing.assert_allclose(g, g_ref, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(c, c_ref, rtol=1e-10, atol=1e-12)


def test_condition_batched(rng):
    covs = np.stack([random_spd(rng, 5) for _ in range(4)])
    g, c = condition_joint(covs, np.array([0]), np.array([1, 2, 3]))
    for k in range(4):
        g1, c1 = condition_joint(covs[k], np.array([0]), np.array([1, 2, 3]))
        np.testing.assert_allclose(g[k], g1)
        np.testing.assert_allclose(c[k], c1)


def test_uncorrelated_conditioning_is_noop(rng):
    sxx = random_spd(rng, 2)
    g, c = condition_blocks(sxx, np.zeros((2, 3)), random_spd(rng, 3))
    assert np.array_equal(g, np.zeros((2, 3)))
    np.testing.assert_allclose(c, sxx)


def test_conditioning_reduces_covariance(rng):
    cov = random_spd(rng, 6)
    _, c = condition_joint(cov, np.array([0, 1]), np.array([2, 3, 4, 5]))
    assert psd_leq(c, cov[:2, :2]) and is_psd(c)


def test_deterministic_zero_components_are_ignored(rng):
    base = random_spd(rng, 3)
    cov = np.zeros((4, 4))
    idx = np.array([0, 1, 3])
    cov[np.ix_(idx, idx)] = base  # component 2 is identically zero
    g, c = condition_joint(cov, np.array([0]), np.array([1, 2, 3]))
    g_ref, c_ref = schur_condition(base, np.array([0]), np.array([1, 2]))
    assert g[0, 1] == 0.0
    np.testing.assert_allclose(g[:, [0, 2]], g_ref, rtol=1e-10)
    np.testing.assert_allclose(c, c_ref, rtol=1e-10)


def test_singular_conditioning_uses_logged_jitter(caplog):
    caplog.set_level(logging.INFO, logger="fdiqcd")
    v = np.array([1.0, 1.0, 0.5])
    cov = np.outer(v, v) + np.diag([1.0, 0.0, 0.0])  # components 1 and 2 collinear
    g, c = condition_joint(cov, np.array([0]), np.array([1, 2]))
    assert np.all(np.isfinite(g)) and np.all(np.isfinite(c))
    assert any("jitter" in r.message for r in caplog.records)
    # still the right conditional variance: x0 = x1 + noise(1)
    assert c[0, 0] == pytest.approx(1.0, rel=1e-6)


def test_whitening(rng):
    cov = random_spd(rng, 3)
    w, logdet = whitening(cov)
    np.testing.assert_allclose(w.T @ w, np.linalg.inv(cov), rtol=1e-10)
    assert logdet == pytest.approx(np.linalg.slogdet(cov)[1])


def test_logpdf_matches_scipy(rng):
    cov = random_spd(rng, 3)
    mean = rng.standard_normal(3)
    x = rng.standard_normal(3)
    assert gaussian_logpdf(x, mean, cov) == pytest.approx(multivariate_normal(mean, cov).logpdf(x), rel=1e-12)
    assert ConditionalGaussian(mean, cov).logpdf(x) == pytest.approx(gaussian_logpdf(x, mean, cov))


def test_logpdf_floor():
    assert gaussian_logpdf(np.array([1e200]), np.zeros(1), np.eye(1)) == pytest.approx(np.log(1e-300))


def test_conditional_gaussian_shape_check():
    with pytest.raises(ValueError):
        ConditionalGaussian(np.zeros(2), np.eye(3))


def test_sample_gaussian_covariance(rng):
    cov = random_spd(rng, 2)
    x = sample_gaussian(rng, cov, 100_000)
    assert np.allclose(np.cov(x.T), cov, atol=0.02 * np.abs(cov).max())
    assert np.array_equal(sample_gaussian(rng, np.zeros((2, 2)), 3), np.zeros((3, 2)))


def test_spd_solve_rejects_indefinite():
    with pytest.raises(np.linalg.LinAlgError):
        spd_solve(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))
