"""Shiryaev-type Bayesian quickest detection at a single node.

For every hypothesised attacked sensor ``l`` the node tracks the posterior
odds ``lambda_l(t)`` that the attack has already started::

    lambda_l(t) = (lambda_l(t-1) + rho) / (1 - rho) * ratio_l(t)

where ``ratio_l(t)`` is the post- over pre-change density of this round's
data (own estimate, neighbour estimates, own observation), each post-change
factor being a mixture over onset times.  Everything is kept in log form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit, logsumexp

from .kcif import GainSchedule
from .moments import (
    NBR,
    OBS,
    OWN,
    ViewDynamics,
    build_factor_tables,
    factor_view,
)
from .sim_core import SystemModel

log = logging.getLogger(__name__)

DEFAULT_ONSET_WINDOW = 20
DEFAULT_RADIUS = 2


@dataclass
class BayesDetectorState:
    """Posterior-odds bank of one node.  ``log_lambda[l]`` is ``log lambda_l``."""

    log_lambda: np.ndarray
    threshold: float
    rho: float
    t: int = 0
    stopped_at: int | None = None
    identified: int | None = None

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        self.log_lambda = np.asarray(self.log_lambda, dtype=float)

    @classmethod
    def initial(cls, n_hypotheses: int, threshold: float, rho: float):
        """``lambda_l(0) = 0`` for every hypothesis."""
        return cls(np.full(n_hypotheses, -np.inf), threshold, rho)

    @property
    def lambdas(self) -> np.ndarray:
        return np.exp(self.log_lambda)

    @property
    def pi(self) -> float:
        return lambda_to_pi(self.lambdas)[0]

    @property
    def stopped(self) -> bool:
        return self.stopped_at is not None


def update_lambda(state: BayesDetectorState, log_ratio) -> BayesDetectorState:
    """One recursion step given ``log ratio_l(t)`` for every ``l``.

    NaN log-ratios are treated as the density floor and logged.
    """
    if state.stopped:
        return state
    lr = np.asarray(log_ratio, dtype=float)
    if lr.shape != state.log_lambda.shape:
        raise ValueError("one log-ratio per hypothesis required")
    if np.any(np.isnan(lr)):
        log.warning("NaN log-ratio at t=%d replaced by floor", state.t + 1)
        lr = np.where(np.isnan(lr), -690.0, lr)
    new = step_log_lambda(state.log_lambda, lr, state.rho)
    return replace(state, log_lambda=new, t=state.t + 1)


def step_log_lambda(log_lambda, log_ratio, rho: float):
    """Vectorised ``log lambda(t)`` from ``log lambda(t-1)``."""
    return np.logaddexp(log_lambda, np.log(rho)) - np.log1p(-rho) + log_ratio


def lambda_to_pi(lambdas) -> tuple:
    """``(pi, argmax_l)`` with ``pi = max_l lambda_l / (1 + lambda_l)``.

    Ties go to the lowest index.
    """
    lam = np.asarray(lambdas, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    with np.errstate(invalid="ignore"):
        pis = lam / (1.0 + lam)
    pis = np.where(np.isinf(lam), 1.0, pis)
    best = int(np.argmax(pis))
    return float(pis[best]), best


def decide(state: BayesDetectorState) -> BayesDetectorState:
    """Stop if ``pi >= threshold``; the maximising hypothesis is reported.

    The test runs on log-odds so that a threshold of 1 is never reached
    by finite odds, however large.
    """
    if state.stopped:
        raise ValueError("detector already stopped")
    best = int(np.argmax(state.log_lambda))
    with np.errstate(divide="ignore"):
        bound = logit(min(state.threshold, 1.0)) if state.threshold > 0 else -np.inf
    if state.log_lambda[best] >= bound:
        return replace(state, stopped_at=state.t, identified=best)
    return state


# ---------------------------------------------------------------------------
# Density model and vectorised traces
# ---------------------------------------------------------------------------


def onset_log_weights(T: int, rho: float, n_ages: int) -> np.ndarray:
    """``log P(tau = t - a | tau <= t)`` on the ``(T+1, n_ages)`` grid.

    Onsets older than ``n_ages - 1`` steps are lumped onto the oldest age.
    Entries with no valid onset are ``-inf``.
    """
    t = np.arange(T + 1)[:, None].astype(float)
    a = np.arange(n_ages)[None, :].astype(float)
    m = t - a
    log_q = np.log1p(-rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_cdf_t = np.log(-np.expm1(t * log_q))  # log P(tau <= t)
        lw = np.log(rho) + (m - 1) * log_q - log_cdf_t
        # lumped mass P(tau <= m) / P(tau <= t) for the oldest age
        lumped = np.log(-np.expm1(m * log_q)) - log_cdf_t
    lw[:, -1:] = lumped[:, -1:]
    return np.where(m >= 1, lw, -np.inf)


@dataclass
class BayesNodeModel:
    """Pre- and post-change factor densities used by node ``node``.

    Built once per (model, node, Sigma); reused across trials.
    """

    model: SystemModel
    schedule: GainSchedule
    node: int
    Sigma: np.ndarray
    rho: float
    onset_window: int = DEFAULT_ONSET_WINDOW
    hypotheses: tuple | None = None
    radius: int | None = DEFAULT_RADIUS
    tables: list = field(init=False, repr=False)
    log_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.hypotheses is None:
            self.hypotheses = tuple(range(self.model.n_nodes))
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        hyps = {l: (l, self.Sigma) for l in self.hypotheses}
        i = self.node
        self.tables = build_node_tables(
            self.model, self.schedule, i, hyps, self.onset_window, self.radius
        )
        self.log_weights = onset_log_weights(self.schedule.horizon, self.rho, self.onset_window)

    @property
    def n_hypotheses(self) -> int:
        return len(self.hypotheses)

    def factor_logpdfs(self, xhat: np.ndarray, y: np.ndarray):
        """Clean ``(..., T+1)`` and attacked ``(..., T+1, L)`` summed log-densities.

        ``xhat``: ``(..., T+1, N, p)``; ``y``: ``(..., T+1, N, q)`` time-indexed.
        """
        clean = 0.0
        post = 0.0
        lw = self.log_weights[: xhat.shape[-3]]
        for tab in self.tables:
            tgt, r = tab.data(xhat, y)
            clean = clean + tab.clean_logpdf(tgt, r)
            per_l = []
            for l in self.hypotheses:
                dens = tab.attacked_logpdf(l, tgt, r)
                per_l.append(_mixture(dens, lw))
            post = post + np.stack(per_l, axis=-1)
        return clean, post

    def log_ratio_trace(self, xhat: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``log ratio_l(t)`` of shape ``(..., T+1, L)``; entry t = 0 is 0."""
        clean, post = self.factor_logpdfs(xhat, y)
        out = post - clean[..., None]
        out[..., 0, :] = 0.0
        return out


def build_node_tables(model, schedule, node, hypotheses, n_ages, radius, kinds=(OWN, OBS, NBR)):
    """Factor tables for ``node``, sharing one view wherever the radius allows."""
    factors = [(k, None) for k in (OWN, OBS) if k in kinds]
    if NBR in kinds:
        factors += [(NBR, j) for j in model.neighbors(node)]
    groups = {}
    for kind, nb in factors:
        view = factor_view(model, node, kind, nb, radius)
        groups.setdefault(view, []).append((kind, nb))
    tables = {}
    for view, facs in groups.items():
        dyn = ViewDynamics(model, schedule, view)
        for fac, tab in zip(facs, build_factor_tables(dyn, facs, hypotheses, n_ages)):
            tables[fac] = tab
    return [tables[f] for f in factors]


def _mixture(dens: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return logsumexp(dens + log_w, axis=-1)


def log_lambda_trace(log_ratio: np.ndarray, rho: float) -> np.ndarray:
    """Run the recursion over a ``(..., T+1, L)`` log-ratio array."""
    out = np.empty_like(log_ratio)
    out[..., 0, :] = -np.inf
    for t in range(1, log_ratio.shape[-2]):
        out[..., t, :] = step_log_lambda(out[..., t - 1, :], log_ratio[..., t, :], rho)
    return out


def pi_trace(log_lambda: np.ndarray):
    """``pi(t)`` and the maximising hypothesis for every t."""
    best = np.argmax(log_lambda, axis=-1)
    top = np.take_along_axis(log_lambda, best[..., None], axis=-1)[..., 0]
    return expit(top), best


def first_crossing(stat: np.ndarray, threshold, start: int = 1) -> np.ndarray:
    """First t >= ``start`` with ``stat[..., t] >= threshold``; -1 if none.

    ``threshold`` broadcasts against the leading axes of ``stat``.
    """
    thr = np.asarray(threshold, dtype=float)[..., None]
    hit = stat[..., start:] >= thr
    any_hit = hit.any(axis=-1)
    idx = np.argmax(hit, axis=-1) + start
    return np.where(any_hit, idx, -1)
