"""Non-Bayesian detection-isolation at a single node.

* windowed MSPRT (known Sigma): stop when
  ``max_{n-t_w <= k <= n} min_{j != i} sum_{t=k}^{n} L_j^{t,k} >= b``;
* window-limited GLR (Sigma in a finite grid Theta): stop when
  ``max_j max_k sup_Sigma sum_{t=k}^{n} L_j^{t,k}(Sigma) >= b``;
* windowed chi-square on the innovation ``z = y_i(t) - C_i A xhat_i(t-1)``.

``L_j^{t,k}`` is the log-ratio of the attacked (onset k, sensor j) to clean
conditional density of the node's own estimate.  The streaming classes work
one round at a time; the ``*_trace`` functions compute the same statistics
for whole batches of paths.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gaussian import spd_solve, symmetrize
from .kcif import GainSchedule
from .moments import OWN, FactorTable, innovation_covariances
from .sim_core import SystemModel

WINDOW_SCALE = 5
DEFAULT_THETA_SCALES = (0.75, 1.5, 3.0, 6.0, 12.0)
DEFAULT_CHI2_WINDOW = 3


def window_size(arl_target: float, scale: int = WINDOW_SCALE) -> int:
    """``t_w = scale * ceil(log(arl_target))``."""
    if arl_target <= 1:
        raise ValueError("arl_target must exceed 1")
    return int(scale * math.ceil(math.log(arl_target)))


def default_theta(q: int, scales=DEFAULT_THETA_SCALES) -> list:
    return [s * np.eye(q) for s in scales]


def hypothesis_nodes(n_nodes: int, node: int, include_self: bool) -> tuple:
    return tuple(j for j in range(n_nodes) if include_self or j != node)


# ---------------------------------------------------------------------------
# Log-likelihood ratios
# ---------------------------------------------------------------------------


def llr_term(table: FactorTable, key, t: int, k: int, target, r) -> float:
    """``L^{t,k}`` for one hypothesis key from a precomputed own-factor table."""
    a = t - k
    if k < 1 or a < 0:
        raise ValueError("need 1 <= k <= t")
    if a >= table.valid.shape[1]:
        raise ValueError("onset outside the retained window")
    target = np.asarray(target, dtype=float)
    r = np.asarray(r, dtype=float)

    def logpdf(gain, white, logdet):
        e = white @ (target - gain @ r)
        return -0.5 * (target.size * np.log(2 * np.pi) + logdet + e @ e)

    post = logpdf(table.gain[key][t, a], table.white[key][t, a], table.logdet[key][t, a])
    pre = logpdf(table.gain0[t], table.white0[t], table.logdet0[t])
    return float(post - pre)


@dataclass
class OwnLlrModel:
    """Own-estimate density tables of node ``node`` for every (sensor, Sigma) pair.

    ``keys`` enumerates ``(j, s)`` with ``j`` a hypothesised sensor and ``s``
    an index into ``thetas``.
    """

    model: SystemModel
    schedule: GainSchedule
    node: int
    thetas: list
    n_ages: int
    include_self: bool = False
    radius: int | None = 2
    table: FactorTable = field(init=False, repr=False)

    def __post_init__(self):
        from .bayes_qcd import build_node_tables

        self.thetas = [np.atleast_2d(np.asarray(s, dtype=float)) for s in self.thetas]
        self.hyp_nodes = hypothesis_nodes(self.model.n_nodes, self.node, self.include_self)
        self.keys = [(j, s) for j in self.hyp_nodes for s in range(len(self.thetas))]
        hyps = {key: (key[0], self.thetas[key[1]]) for key in self.keys}
        (self.table,) = build_node_tables(
            self.model, self.schedule, self.node, hyps, self.n_ages, self.radius, kinds=(OWN,)
        )

    def llr_table(self, xhat: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``L[..., t, a, j, s]`` for onset ``k = t - a``; ``-inf`` where ``k < 1``."""
        tgt, r = self.table.data(xhat, y)
        pre = self.table.clean_logpdf(tgt, r)
        nj, ns = len(self.hyp_nodes), len(self.thetas)
        out = np.empty(pre.shape + (self.n_ages, nj, ns))
        for j_idx, j in enumerate(self.hyp_nodes):
            for s in range(ns):
                out[..., j_idx, s] = self.table.attacked_logpdf((j, s), tgt, r) - pre[..., None]
        return out


def onset_sums(llr: np.ndarray) -> np.ndarray:
    """Cumulative sums along onset diagonals.

    ``llr[..., t, a, j, s]`` is the term at time ``t`` for onset ``t - a``.
    Returns ``C[..., k, a, j, s] = sum_{b=0}^{a} llr[..., k + b, b, j, s]``,
    the sum from onset ``k`` up to time ``k + a`` (``-inf`` where undefined).
    """
    T = llr.shape[-4] - 1
    n_ages = llr.shape[-3]
    diag = np.full(llr.shape, -np.inf)
    for a in range(min(n_ages, T)):
        diag[..., 1 : T + 1 - a, a, :, :] = llr[..., 1 + a : T + 1, a, :, :]
    return np.cumsum(diag, axis=-3)


def _windowed(C: np.ndarray, reduce_hyp, window: int):
    """``stat[n] = max_{0<=a<=window} reduce_hyp(C[n-a, a])`` and its argmax data.

    ``reduce_hyp`` maps the trailing hypothesis axes to ``(value, j_index)``.
    """
    T = C.shape[-4] - 1
    lead = C.shape[:-4]
    stat = np.full(lead + (T + 1,), -np.inf)
    ident = np.zeros(lead + (T + 1,), dtype=int)
    onset = np.zeros(lead + (T + 1,), dtype=int)
    for a in range(min(window + 1, C.shape[-3], T)):
        val, j = reduce_hyp(C[..., 1 : T + 1 - a, a, :, :])  # onset k = 1..T-a, time n = k + a
        cur = stat[..., 1 + a :]
        better = val > cur
        stat[..., 1 + a :] = np.where(better, val, cur)
        ident[..., 1 + a :] = np.where(better, j, ident[..., 1 + a :])
        onset[..., 1 + a :] = np.where(better, np.arange(1, T + 1 - a), onset[..., 1 + a :])
    stat[..., 0] = -np.inf
    return stat, ident, onset


def msprt_trace(llr: np.ndarray, window: int, theta_index: int = 0):
    """MSPRT statistic, identified hypothesis index and maximising onset per time.

    ``llr``: output of :meth:`OwnLlrModel.llr_table`; the Sigma axis is fixed
    to ``theta_index``.
    """
    C = onset_sums(llr[..., theta_index : theta_index + 1])

    def reduce(block):
        vals = block[..., 0]
        return vals.min(axis=-1), vals.argmax(axis=-1)

    return _windowed(C, reduce, window)


def wlglr_trace(llr: np.ndarray, window: int):
    """WL-GLR statistic and the maximising hypothesis index per time."""
    C = onset_sums(llr)

    def reduce(block):
        over_sigma = block.max(axis=-1)
        return over_sigma.max(axis=-1), over_sigma.argmax(axis=-1)

    return _windowed(C, reduce, window)


# ---------------------------------------------------------------------------
# Streaming versions
# ---------------------------------------------------------------------------


@dataclass
class LlrWindow:
    """Running sums ``sum_{t=k}^{n} L_j^{t,k}`` for onsets ``k`` in the window.

    ``sums[k]`` has shape ``(n_hyp, n_sigma)``.
    """

    window: int
    threshold: float
    n: int = 0
    sums: dict = field(default_factory=dict)
    stopped_at: int | None = None
    identified: int | None = None
    onset: int | None = None

    def add(self, terms: np.ndarray):
        """``terms[a]`` holds ``L^{n,n-a}`` (shape ``(n_hyp, n_sigma)``), a = 0..."""
        self.n += 1
        n = self.n
        for a in range(min(len(terms), self.window + 1)):
            k = n - a
            if k < 1:
                break
            prev = self.sums.get(k)
            self.sums[k] = terms[a] if prev is None else prev + terms[a]
        for k in [k for k in self.sums if k < n - self.window]:
            del self.sums[k]


def msprt_statistic(state: LlrWindow, theta_index: int = 0):
    best, best_k, best_j = -np.inf, None, None
    for k in sorted(state.sums):
        vals = state.sums[k][:, theta_index]
        v = float(vals.min())
        if v > best:
            best, best_k, best_j = v, k, int(vals.argmax())
    return best, best_k, best_j


def msprt_step(state: LlrWindow, terms: np.ndarray, theta_index: int = 0) -> LlrWindow:
    """Feed one round's LLR terms; stops when the statistic reaches the threshold."""
    if state.stopped_at is not None:
        return state
    state.add(np.asarray(terms, dtype=float))
    stat, k, j = msprt_statistic(state, theta_index)
    if stat >= state.threshold:
        state.stopped_at, state.onset, state.identified = state.n, k, j
    return state


@dataclass
class GlrState(LlrWindow):
    """WL-GLR running state; the grid itself lives in :class:`OwnLlrModel`."""


def glr_statistic(state: LlrWindow):
    best, best_j = -np.inf, None
    for k in sorted(state.sums):
        over_sigma = state.sums[k].max(axis=-1)
        v = float(over_sigma.max())
        if v > best:
            best, best_j = v, int(over_sigma.argmax())
    return best, best_j


def wlglr_step(state: GlrState, terms: np.ndarray) -> GlrState:
    if state.stopped_at is not None:
        return state
    state.add(np.asarray(terms, dtype=float))
    stat, j = glr_statistic(state)
    if stat >= state.threshold:
        state.stopped_at, state.identified = state.n, j
    return state


# ---------------------------------------------------------------------------
# Chi-square baseline
# ---------------------------------------------------------------------------


@dataclass
class Chi2State:
    """Last ``J`` normalised innovation energies."""

    threshold: float
    J: int = DEFAULT_CHI2_WINDOW
    window: deque = field(default_factory=deque)
    n: int = 0
    stopped_at: int | None = None

    @property
    def statistic(self) -> float:
        return float(sum(self.window))


def chi2_step(state: Chi2State, innovation, innovation_cov) -> Chi2State:
    """Add ``z' cov(z)^-1 z`` to the window and test against the threshold."""
    if state.stopped_at is not None:
        return state
    z = np.asarray(innovation, dtype=float)
    cov = symmetrize(np.atleast_2d(innovation_cov))
    try:
        energy = float(z @ spd_solve(cov, z))
    except np.linalg.LinAlgError:
        jit = 1e-9 * max(np.trace(cov) / cov.shape[0], 1e-300)
        energy = float(z @ np.linalg.solve(cov + jit * np.eye(cov.shape[0]), z))
    state.n += 1
    state.window.append(energy)
    if len(state.window) > state.J:
        state.window.popleft()
    if state.statistic >= state.threshold:
        state.stopped_at = state.n
    return state


@dataclass
class Chi2Model:
    """Innovation covariances of node ``node`` (exact, from the joint moments)."""

    model: SystemModel
    schedule: GainSchedule
    node: int
    J: int = DEFAULT_CHI2_WINDOW

    def __post_init__(self):
        self.cov = innovation_covariances(self.model, self.schedule, self.node)
        self.cov[0] = np.eye(self.model.q)
        self.cov_inv = np.linalg.inv(self.cov)

    def innovations(self, xhat: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``z[..., t]`` for t = 0..T (entry 0 is 0)."""
        i = self.node
        CA = self.model.sensors[i].C @ self.model.A
        z = np.zeros(y.shape[:-2] + (y.shape[-1],))
        z[..., 1:, :] = y[..., 1:, i, :] - xhat[..., :-1, i, :] @ CA.T
        return z

    def energy(self, xhat, y) -> np.ndarray:
        z = self.innovations(xhat, y)
        cinv = self.cov_inv[: z.shape[-2]]
        return np.einsum("...ti,tij,...tj->...t", z, cinv, z)

    def trace(self, xhat, y) -> np.ndarray:
        """Windowed statistic for t = 0..T (entry 0 is -inf)."""
        e = self.energy(xhat, y)
        c = np.cumsum(e, axis=-1)
        stat = c.copy()
        stat[..., self.J :] = c[..., self.J :] - c[..., : -self.J]
        stat[..., 0] = -np.inf
        return stat
