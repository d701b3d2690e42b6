"""Kalman consensus information filter (KCIF).

At round t every node i receives ``(xhat_j(t-1), u_j(t), U_j)`` from each
neighbour, fuses ``phi_i = sum u_j`` and ``S_i = sum U_j`` over ``N'_i`` and
updates::

    M_i(t)    = (P_i(t)^-1 + S_i)^-1
    xhat_i(t) = A xhat_i(t-1) + M_i(t) (phi_i - S_i A xhat_i(t-1))
                + gamma P_i(t) A sum_{j in N_i} (xhat_j(t-1) - xhat_i(t-1))
    P_i(t+1)  = A M_i(t) A' + Q

The covariance recursion never touches data, so :func:`compute_gain_schedule`
precomputes it once and :func:`run_network` replays it over many trials.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gaussian import spd_inv, spd_solve, symmetrize
from .sim_core import SensorModel, SystemModel

FIXED = "fixed"
ADAPTIVE = "adaptive"


@dataclass
class NodeFilterState:
    """One node's filter state after the round that produced ``xhat``.

    ``P`` is the prediction covariance for the *next* round; ``P_prior`` is
    the one that was used to form ``M`` in the last round.
    """

    xhat: np.ndarray
    P: np.ndarray
    M: np.ndarray | None = None
    P_prior: np.ndarray | None = None
    gain_mode: str = FIXED
    gain: float = 0.05
    t: int = 0

    def __post_init__(self):
        if self.gain_mode not in (FIXED, ADAPTIVE):
            raise ValueError(f"unknown gain mode {self.gain_mode!r}")

    @classmethod
    def initial(cls, model: SystemModel, gain_mode: str = FIXED, gain: float = 0.05):
        """``xhat(0) = 0`` and ``P(1) = A P0 A' + Q``."""
        P1 = symmetrize(model.A @ model.P0 @ model.A.T + model.Q)
        return cls(xhat=np.zeros(model.p), P=P1, gain_mode=gain_mode, gain=gain)


@dataclass(frozen=True)
class ConsensusMessage:
    sender: int
    xhat_prev: np.ndarray
    u: np.ndarray
    U: np.ndarray


def local_information(sensor: SensorModel, y: np.ndarray):
    """``u = C' R^-1 y`` and ``U = C' R^-1 C``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (sensor.q,):
        raise ValueError(f"y must have shape ({sensor.q},)")
    rinv_c = spd_solve(sensor.R, sensor.C)
    rinv_y = spd_solve(sensor.R, y)
    return sensor.C.T @ rinv_y, symmetrize(sensor.C.T @ rinv_c)


def fuse(messages, expected_senders=None):
    """Sum information vectors and matrices over ``N'_i``.

    ``expected_senders`` (if given) must match the message senders exactly.
    """
    senders = [m.sender for m in messages]
    if len(set(senders)) != len(senders):
        raise ValueError(f"duplicate sender in {senders}")
    if expected_senders is not None and set(senders) != set(expected_senders):
        raise ValueError(
            f"messages from {sorted(senders)} do not cover {sorted(expected_senders)}"
        )
    if not messages:
        raise ValueError("no messages to fuse")
    phi = np.sum([m.u for m in messages], axis=0)
    S = np.sum([m.U for m in messages], axis=0)
    return phi, S


def consensus_gain(state: NodeFilterState) -> float:
    if state.gain_mode == FIXED:
        return float(state.gain)
    return float(state.gain / (np.linalg.norm(state.P, "fro") + 1.0))


def kcif_update(
    state: NodeFilterState,
    model: SystemModel,
    phi: np.ndarray,
    S: np.ndarray,
    neighbor_estimates,
) -> NodeFilterState:
    """One KCIF round at a node.  ``neighbor_estimates`` are ``xhat_j(t-1)``."""
    A = model.A
    P = state.P
    gamma = consensus_gain(state)
    M = spd_inv(spd_inv(P) + S)
    xbar = A @ state.xhat
    consensus = np.zeros(model.p)
    for xj in neighbor_estimates:
        consensus = consensus + (np.asarray(xj) - state.xhat)
    xhat = xbar + M @ (phi - S @ xbar) + gamma * P @ A @ consensus
    P_next = symmetrize(A @ M @ A.T + model.Q)
    return replace(state, xhat=xhat, P=P_next, M=M, P_prior=P, t=state.t + 1)


def network_round(model: SystemModel, states: list, y_t: np.ndarray) -> list:
    """Advance every node by one synchronous round.

    Each node sees only this round's messages and its own previous state.
    """
    n = model.n_nodes
    outbox = []
    for j in range(n):
        u, U = local_information(model.sensors[j], y_t[j])
        outbox.append(ConsensusMessage(j, states[j].xhat.copy(), u, U))
    new_states = []
    for i in range(n):
        closed = model.closed_neighbors(i)
        phi, S = fuse([outbox[j] for j in closed], expected_senders=closed)
        nbr = [outbox[j].xhat_prev for j in model.neighbors(i)]
        new_states.append(kcif_update(states[i], model, phi, S, nbr))
    return new_states


# ---------------------------------------------------------------------------
# Vectorised path
# ---------------------------------------------------------------------------


@dataclass
class GainSchedule:
    """Data-independent filter quantities for t = 1..horizon.

    Arrays are indexed by time directly; index 0 is unused padding.
    ``P[t, i]`` is P_i(t), ``M[t, i]`` is M_i(t), ``gamma[t, i]`` the
    consensus gain used at round t.
    """

    P: np.ndarray
    M: np.ndarray
    gamma: np.ndarray
    S: np.ndarray
    U: np.ndarray
    gain_mode: str
    gain: float

    @property
    def horizon(self) -> int:
        return self.P.shape[0] - 1


def compute_gain_schedule(
    model: SystemModel, horizon: int, gain_mode: str = FIXED, gain: float = 0.05
) -> GainSchedule:
    n, p = model.n_nodes, model.p
    U = np.stack([local_information(s, np.zeros(s.q))[1] for s in model.sensors])
    closed = np.eye(n, dtype=int) + model.adjacency
    S = np.einsum("ij,jab->iab", closed, U)
    P = np.zeros((horizon + 1, n, p, p))
    M = np.zeros((horizon + 1, n, p, p))
    gamma = np.zeros((horizon + 1, n))
    Pt = np.broadcast_to(symmetrize(model.A @ model.P0 @ model.A.T + model.Q), (n, p, p))
    probe = NodeFilterState(np.zeros(p), Pt[0], gain_mode=gain_mode, gain=gain)
    for t in range(1, horizon + 1):
        P[t] = Pt
        M[t] = spd_inv(spd_inv(Pt) + S)
        for i in range(n):
            gamma[t, i] = consensus_gain(replace(probe, P=Pt[i]))
        Pt = symmetrize(model.A @ M[t] @ model.A.T + model.Q)
    return GainSchedule(P=P, M=M, gamma=gamma, S=S, U=U, gain_mode=gain_mode, gain=gain)


def run_network(model: SystemModel, schedule: GainSchedule, observations: np.ndarray) -> np.ndarray:
    """Run all nodes over one or many observation paths.

    ``observations`` has shape ``(..., T, N, q)`` with ``[..., t-1, i]`` equal
    to ``y_i(t)``.  Returns ``xhat`` of shape ``(..., T+1, N, p)`` with
    ``xhat[..., 0, :] = 0``.
    """
    y = np.asarray(observations, dtype=float)
    T = y.shape[-3]
    if T > schedule.horizon:
        raise ValueError("gain schedule shorter than the observation horizon")
    A = model.A
    n, p = model.n_nodes, model.p
    adj = model.adjacency.astype(float)
    closed = np.eye(n) + adj
    deg = adj.sum(axis=1)
    CtRinv = np.stack([spd_solve(s.R, s.C).T for s in model.sensors])  # (n, p, q)
    u = np.einsum("npq,...tnq->...tnp", CtRinv, y)
    phi = np.einsum("ij,...tjp->...tip", closed, u)
    xhat = np.zeros(y.shape[:-3] + (T + 1, n, p))
    for t in range(1, T + 1):
        prev = xhat[..., t - 1, :, :]
        xbar = prev @ A.T
        innov = phi[..., t - 1, :, :] - np.einsum("nab,...nb->...na", schedule.S, xbar)
        nbr_sum = np.einsum("ij,...jp->...ip", adj, prev) - deg[:, None] * prev
        PA = schedule.P[t] @ A  # (n, p, p)
        xhat[..., t, :, :] = (
            xbar
            + np.einsum("nab,...nb->...na", schedule.M[t], innov)
            + schedule.gamma[t][:, None] * np.einsum("nab,...nb->...na", PA, nbr_sum)
        )
    return xhat
