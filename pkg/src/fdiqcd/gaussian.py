"""Small dense-Gaussian toolkit shared by the filter, moment and detector code.

Everything here works on plain numpy arrays.  Batched variants accept a
leading stack axis so that whole banks of covariances can be conditioned in
one call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
# floor used whenever a density underflows to zero or comes back NaN
LOG_DENSITY_FLOOR = float(np.log(1e-300))
JITTER_SCALE = 1e-9


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix that must be SPD is not."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def is_psd(m: np.ndarray, tol: float = 1e-10) -> bool:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if not np.allclose(m, m.T, atol=tol * scale, rtol=0.0):
        return False
    return bool(np.min(np.linalg.eigvalsh(symmetrize(m))) >= -tol * scale)


def psd_leq(a: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> bool:
    """``a <= b`` in the Loewner order, up to a relative tolerance."""
    diff = symmetrize(np.asarray(b) - np.asarray(a))
    scale = max(1.0, float(np.max(np.abs(b))))
    return bool(np.min(np.linalg.eigvalsh(diff)) >= -tol * scale)


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``.

    Raises NotPositiveDefiniteError instead of silently returning garbage.
    """
    try:
        c = np.linalg.cholesky(symmetrize(a))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc
    z = np.linalg.solve(c, b)
    return np.linalg.solve(np.swapaxes(c, -1, -2), z)


def spd_inv(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    return symmetrize(spd_solve(a, eye))


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Factor ``S`` with ``S S' = cov`` for a (possibly singular) PSD matrix."""
    vals, vecs = np.linalg.eigh(symmetrize(np.asarray(cov, dtype=float)))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_gaussian(rng: np.random.Generator, cov: np.ndarray, size=None) -> np.ndarray:
    """Zero-mean Gaussian draws; ``cov`` may be singular (e.g. all zeros)."""
    cov = np.asarray(cov, dtype=float)
    dim = cov.shape[0]
    shape = (dim,) if size is None else tuple(np.atleast_1d(size)) + (dim,)
    z = rng.standard_normal(shape)
    return z @ psd_sqrt(cov).T


@dataclass
class ConditionalGaussian:
    """A Gaussian ``N(mean, cov)``, typically the result of conditioning."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(
                f"mean has size {self.mean.size} but cov has shape {self.cov.shape}"
            )

    def logpdf(self, x: np.ndarray) -> float:
        return gaussian_logpdf(x, self.mean, self.cov)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    c = np.linalg.cholesky(symmetrize(np.atleast_2d(cov)))
    e = np.linalg.solve(c, x - mean)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    with np.errstate(over="ignore"):
        val = -0.5 * (x.size * LOG_2PI + logdet + float(e @ e))
    if not np.isfinite(val):
        log.warning("log-density non-finite; floored")
        return LOG_DENSITY_FLOOR
    return float(max(val, LOG_DENSITY_FLOOR))


def _mask_degenerate(s_rr: np.ndarray, s_xr: np.ndarray):
    """Neutralise conditioning components with exactly zero variance.

    Such components are deterministic zeros (e.g. the filter's initial
    estimate), carry no information and would make the solve singular.
    Their rows/columns are replaced by identity/zero so the gain on them is 0.
    """
    diag = np.diagonal(s_rr, axis1=-2, axis2=-1)
    scale = np.max(np.abs(diag), axis=-1, keepdims=True)
    dead = diag <= 1e-14 * np.maximum(scale, 1e-300)
    if not np.any(dead):
        return s_rr, s_xr
    s_rr = s_rr.copy()
    s_xr = s_xr.copy()
    keep = ~dead
    # zero every row/col touching a dead component, then put 1 on its diagonal
    s_rr *= keep[..., :, None] & keep[..., None, :]
    idx = np.arange(s_rr.shape[-1])
    s_rr[..., idx, idx] += dead.astype(float)
    s_xr *= keep[..., None, :]
    return s_rr, s_xr


def _robust_cholesky(s: np.ndarray) -> np.ndarray:
    """Batched Cholesky with per-matrix jitter fallback."""
    s = symmetrize(s)
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    flat = s.reshape((-1,) + s.shape[-2:])
    out = np.empty_like(flat)
    jittered = []
    for n, m in enumerate(flat):
        try:
            out[n] = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            dim = m.shape[0]
            jit = JITTER_SCALE * max(np.trace(m) / dim, 1e-300)
            jittered.append(jit)
            out[n] = np.linalg.cholesky(m + jit * np.eye(dim))
    # rank deficiency is structural when estimates coincide, so not a warning
    log.info(
        "%d singular covariance(s) in batch; jitter up to %.3e added", len(jittered), max(jittered)
    )
    return out.reshape(s.shape)


def condition_blocks(s_xx, s_xr, s_rr):
    """Conditioning from covariance blocks.

    Returns ``(gain, cov)`` such that ``E[x | r] = gain @ r`` and
    ``cov[x | r] = cov``.  All arguments may carry leading batch axes.
    """
    s_xx = np.asarray(s_xx, dtype=float)
    s_rr, s_xr = _mask_degenerate(np.asarray(s_rr, float), np.asarray(s_xr, float))
    c = _robust_cholesky(s_rr)
    # gain' = S_rr^{-1} S_rx  via two triangular solves
    z = np.linalg.solve(c, np.swapaxes(s_xr, -1, -2))
    gain_t = np.linalg.solve(np.swapaxes(c, -1, -2), z)
    gain = np.swapaxes(gain_t, -1, -2)
    cov = s_xx - np.swapaxes(z, -1, -2) @ z
    return gain, symmetrize(cov)


def condition_joint(cov: np.ndarray, target_idx, cond_idx):
    """Gain and conditional covariance of ``z[target_idx]`` given ``z[cond_idx]``."""
    cov = np.asarray(cov, dtype=float)
    ti = np.asarray(target_idx)
    ci = np.asarray(cond_idx)
    s_xx = cov[..., ti[:, None], ti[None, :]]
    s_xr = cov[..., ti[:, None], ci[None, :]]
    s_rr = cov[..., ci[:, None], ci[None, :]]
    return condition_blocks(s_xx, s_xr, s_rr)


def whitening(cov: np.ndarray):
    """Inverse Cholesky factor and log-determinant, batched.

    ``||W e||^2 = e' cov^{-1} e`` with ``W`` the returned factor.
    """
    c = _robust_cholesky(np.asarray(cov, dtype=float))
    eye = np.broadcast_to(np.eye(c.shape[-1]), c.shape)
    w = np.linalg.solve(c, eye)
    logdet = 2.0 * np.sum(np.log(np.diagonal(c, axis1=-2, axis2=-1)), axis=-1)
    return w, logdet
