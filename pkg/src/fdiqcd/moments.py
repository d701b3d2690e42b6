"""Second moments of the KCIF estimates and the conditional densities built on them.

Every KCIF estimate is a zero-mean linear function of ``x(0)``, the process
noise and the measurement noise, so all quantities a detector needs are
blocks of one joint covariance.  For a node ``i`` we track the lagged vector::

    Z(t) = [x(t); xhat_V(t); y_i(t); xhat_V(t-1); y_i(t-1); xhat_V(t-2)]

over a *view* ``V`` of nodes (``i`` and every node within a chosen hop
radius).  Its covariance obeys ``cov Z(t) = Phi(t) cov Z(t-1) Phi(t)' + W(t)``.
Restricted to the x / xhat blocks this is exactly the recursion for ``B``,
``L_i``, ``H_i``, ``T_ij`` and ``J_ij`` under the locality convention used at
sensor ``i``:

* nodes outside ``V`` are structurally absent, so their estimates drop out
  of the consensus sums of nodes in ``V`` (the ``-gamma P A N_k`` part of
  ``D_k`` still uses the full degree);
* the measurement noise of a node outside ``V`` enters each in-view
  estimate as an independent private copy: it adds to ``L_k`` but not to
  cross terms ``T_kl``.

With radius 1 this is the zero-for-non-neighbours convention.  On a
complete graph, or when the radius covers the graph, the recursion is
exact.  An attack at sensor ``l`` from onset ``m`` replaces ``R_l`` by
``R_l + Sigma`` in the noise covariance for ``t >= m``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .gaussian import (
    ConditionalGaussian,
    condition_joint,
    gaussian_logpdf,
    spd_solve,
    symmetrize,
    whitening,
)
from .kcif import GainSchedule
from .sim_core import SystemModel

log = logging.getLogger(__name__)

DEGENERATE_RTOL = 1e-12  # conditional/prior variance below which a factor is a point mass

OWN = "own"
OBS = "obs"
NBR = "nbr"


@dataclass(frozen=True)
class View:
    """Node set tracked at one sensor.

    ``nodes[0]`` is the centre and ``nbrs`` its neighbours (in the order
    used by conditioning vectors).  ``consensus[k]`` lists the nodes whose
    estimates enter the consensus sum of ``nodes[k]`` inside this view.
    """

    center: int
    nodes: tuple
    consensus: tuple
    nbrs: tuple
    label: str = ""

    @property
    def n(self) -> int:
        return len(self.nodes)

    def pos(self, node: int) -> int:
        return self.nodes.index(node)

    @property
    def neighbors(self) -> tuple:
        return self.nbrs


def _hop_distances(model: SystemModel, i: int) -> dict:
    dist = {i: 0}
    frontier = [i]
    while frontier:
        nxt = []
        for k in frontier:
            for r in model.neighbors(k):
                if r not in dist:
                    dist[r] = dist[k] + 1
                    nxt.append(r)
        frontier = nxt
    return dist


def ball_view(model: SystemModel, i: int, radius: int | None = 1) -> View:
    """Nodes within ``radius`` hops of ``i`` (all nodes if ``None``).

    Estimates of nodes outside the ball are structurally absent: they drop
    out of the consensus sums of the nodes inside it.
    """
    if radius is not None and radius < 1:
        raise ValueError("radius must be >= 1")
    dist = _hop_distances(model, i)
    inside = [k for k in dist if radius is None or dist[k] <= radius]
    nodes = tuple(sorted(inside, key=lambda k: (dist[k], k)))
    members = set(nodes)
    consensus = tuple(tuple(r for r in model.neighbors(k) if r in members) for k in nodes)
    label = f"ball{i}r{radius}" if radius is not None else f"global{i}"
    return View(i, nodes, consensus, tuple(model.neighbors(i)), label=label)


def center_view(model: SystemModel, i: int) -> View:
    """``i`` and its neighbours only: the zero-for-non-neighbours convention."""
    v = ball_view(model, i, 1)
    return replace(v, label=f"center{i}")


def pair_view(model: SystemModel, i: int, j: int) -> View:
    """Centre view of ``i`` in which neighbour ``j`` listens to ``i`` only."""
    if j not in model.neighbors(i):
        raise ValueError(f"{j} is not a neighbour of {i}")
    base = center_view(model, i)
    consensus = list(base.consensus)
    consensus[base.pos(j)] = (i,)
    return replace(base, consensus=tuple(consensus), label=f"pair{i}-{j}")


def global_view(model: SystemModel, i: int) -> View:
    """Every node, no truncation: exact joint moments seen from node ``i``."""
    return ball_view(model, i, None)


def factor_view(model: SystemModel, i: int, kind: str, neighbor=None, radius: int | None = 1) -> View:
    """View on which a density factor of node ``i`` is evaluated.

    With ``radius == 1`` the neighbour factor ignores every neighbour of
    ``j`` other than ``i``; with a larger radius those neighbours stay in
    the dynamics and are only left out of the conditioning vector.
    """
    if kind == NBR and radius == 1:
        return pair_view(model, i, neighbor)
    if radius == 1:
        return center_view(model, i)
    return ball_view(model, i, radius)


class Layout:
    """Index bookkeeping for the lagged state of a view."""

    def __init__(self, view: View, p: int, q: int):
        self.view, self.p, self.q = view, p, q
        n = view.n
        self._xh = [p, p + n * p + q, p + 2 * n * p + 2 * q]
        self._y = [p + n * p, p + 2 * n * p + q]
        self.dim = p + 3 * n * p + 2 * q

    def x(self) -> np.ndarray:
        return np.arange(self.p)

    def xhat(self, node: int, lag: int = 0) -> np.ndarray:
        start = self._xh[lag] + self.view.pos(node) * self.p
        return np.arange(start, start + self.p)

    def xhat_block(self, lag: int) -> slice:
        return slice(self._xh[lag], self._xh[lag] + self.view.n * self.p)

    def y(self, lag: int = 0) -> np.ndarray:
        return np.arange(self._y[lag], self._y[lag] + self.q)


# ---------------------------------------------------------------------------
# Factor definitions: (target, conditioning vector) index sets
# ---------------------------------------------------------------------------

def factor_indices(layout: Layout, kind: str, neighbor: int | None = None):
    """Target and conditioning indices for one density factor.

    own: ``xhat_i(t) | [xhat_i(t-1), xhat_N(t-1), y_i(t)]``
    obs: ``y_i(t) | [xhat_i(t-1), xhat_N(t-2), y_i(t-1)]``
    nbr: ``xhat_j(t-1) | [xhat_j(t-2), xhat_i(t-1), y_i(t)]``
    """
    v = layout.view
    i = v.center
    if kind == OWN:
        tgt = layout.xhat(i, 0)
        cond = [layout.xhat(i, 1)] + [layout.xhat(j, 1) for j in v.neighbors] + [layout.y(0)]
    elif kind == OBS:
        tgt = layout.y(0)
        cond = [layout.xhat(i, 1)] + [layout.xhat(j, 2) for j in v.neighbors] + [layout.y(1)]
    elif kind == NBR:
        if neighbor is None:
            raise ValueError("nbr factor needs a neighbour")
        tgt = layout.xhat(neighbor, 1)
        cond = [layout.xhat(neighbor, 2), layout.xhat(i, 1), layout.y(0)]
    else:
        raise ValueError(f"unknown factor {kind!r}")
    return tgt, np.concatenate(cond)


def factor_data(kind: str, view: View, xhat: np.ndarray, y: np.ndarray, neighbor=None):
    """Assemble realised targets and conditioning vectors for every t.

    ``xhat``: ``(..., T+1, N, p)`` filter output; ``y``: ``(..., T+1, N, q)``
    time-indexed observations with ``y[..., 0] = 0``.  Returns arrays indexed
    by t = 0..T (entry 0 is unused).  Estimates before time 0 are zero.
    """
    i = view.center
    pad = np.zeros_like(xhat[..., :1, :, :])
    xh1 = np.concatenate([pad, xhat[..., :-1, :, :]], axis=-3)  # xhat(t-1)
    xh2 = np.concatenate([pad, xh1[..., :-1, :, :]], axis=-3)  # xhat(t-2)
    ypad = np.zeros_like(y[..., :1, :, :])
    y1 = np.concatenate([ypad, y[..., :-1, :, :]], axis=-3)
    nb = list(view.neighbors)
    if kind == OWN:
        tgt = xhat[..., i, :]
        parts = [xh1[..., i, :]] + [xh1[..., j, :] for j in nb] + [y[..., i, :]]
    elif kind == OBS:
        tgt = y[..., i, :]
        parts = [xh1[..., i, :]] + [xh2[..., j, :] for j in nb] + [y1[..., i, :]]
    elif kind == NBR:
        tgt = xh1[..., neighbor, :]
        parts = [xh2[..., neighbor, :], xh1[..., i, :], y[..., i, :]]
    else:
        raise ValueError(f"unknown factor {kind!r}")
    return tgt, np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# Moment propagation
# ---------------------------------------------------------------------------


def propagate_B(B_prev: np.ndarray, A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return symmetrize(A @ B_prev @ A.T + Q)


def helper_matrices(model: SystemModel, schedule: GainSchedule, node: int, t: int):
    """``(D, G, F)`` for ``node`` at round ``t``."""
    A = model.A
    M, P = schedule.M[t, node], schedule.P[t, node]
    G = M @ schedule.S[node] @ A
    F = P @ A
    D = A - G - schedule.gamma[t, node] * F * model.degree(node)
    return D, G, F


class ViewDynamics:
    """``Phi(t)``, noise loadings and noise covariances for one view."""

    def __init__(self, model: SystemModel, schedule: GainSchedule, view: View):
        self.model, self.schedule, self.view = model, schedule, view
        p, q = model.p, model.q
        self.layout = lay = Layout(view, p, q)
        members = set(view.nodes)
        # noise columns: w, then shared v_r (r in view), then private copies
        cols = [("w", None, None)]
        cols += [("v", r, None) for r in view.nodes]
        for k in view.nodes:
            for r in model.closed_neighbors(k):
                if r not in members:
                    cols.append(("v", r, k))
        self.noise_cols = cols
        widths = [p if c[0] == "w" else q for c in cols]
        self._col_start = np.concatenate([[0], np.cumsum(widths)])
        self.n_noise = int(self._col_start[-1])
        self.T = schedule.horizon
        self.Phi = np.stack([self._phi(t) for t in range(self.T + 1)])
        self.Gamma = np.stack([self._gamma(t) for t in range(self.T + 1)])
        base = np.zeros((self.n_noise, self.n_noise))
        for c, (kind, r, _) in enumerate(cols):
            s = slice(self._col_start[c], self._col_start[c + 1])
            base[s, s] = model.Q if kind == "w" else model.sensors[r].R
        self._base_noise = base
        self.W_clean = symmetrize(self.Gamma @ base @ self.Gamma.transpose(0, 2, 1))

    def _cols_of(self, r: int) -> list:
        return [c for c, (kind, rr, _) in enumerate(self.noise_cols) if kind == "v" and rr == r]

    def _phi(self, t: int) -> np.ndarray:
        lay, model, v = self.layout, self.model, self.view
        phi = np.zeros((lay.dim, lay.dim))
        if t == 0:
            return phi
        x = lay.x()
        phi[np.ix_(x, x)] = model.A
        for k, g in enumerate(v.nodes):
            D, G, F = helper_matrices(model, self.schedule, g, t)
            rows = lay.xhat(g, 0)
            phi[np.ix_(rows, x)] = G
            phi[np.ix_(rows, rows)] += D
            gam = self.schedule.gamma[t, g]
            for r in v.consensus[k]:
                phi[np.ix_(rows, lay.xhat(r, 0))] += gam * F
        C = model.sensors[v.center].C
        phi[np.ix_(lay.y(0), x)] = C @ model.A
        eye_x = np.eye(v.n * self.model.p)
        phi[lay.xhat_block(1), lay.xhat_block(0)] = eye_x
        phi[lay.xhat_block(2), lay.xhat_block(1)] = eye_x
        phi[np.ix_(lay.y(1), lay.y(0))] = np.eye(model.q)
        return phi

    def _gamma(self, t: int) -> np.ndarray:
        lay, model, v = self.layout, self.model, self.view
        g_mat = np.zeros((lay.dim, self.n_noise))
        if t == 0:
            return g_mat
        for c, (kind, r, owner) in enumerate(self.noise_cols):
            cs = slice(self._col_start[c], self._col_start[c + 1])
            if kind == "w":
                g_mat[lay.x(), cs] = np.eye(model.p)
                for g in v.nodes:
                    g_mat[lay.xhat(g, 0), cs] = self.schedule.M[t, g] @ self.schedule.S[g]
                g_mat[lay.y(0), cs] = model.sensors[v.center].C
                continue
            sensor = model.sensors[r]
            load = spd_solve(sensor.R, sensor.C).T  # C' R^-1
            targets = [owner] if owner is not None else [
                g for g in v.nodes if r in model.closed_neighbors(g)
            ]
            for g in targets:
                g_mat[lay.xhat(g, 0), cs] = self.schedule.M[t, g] @ load
            if owner is None and r == v.center:
                g_mat[lay.y(0), cs] = np.eye(model.q)
        return g_mat

    def attack_noise(self, attacked: int, Sigma: np.ndarray) -> np.ndarray:
        """Extra noise covariance ``W_att(t) - W_clean(t)`` for every t."""
        extra = np.zeros((self.T + 1, self.layout.dim, self.layout.dim))
        for c in self._cols_of(attacked):
            g = self.Gamma[:, :, self._col_start[c] : self._col_start[c + 1]]
            extra += g @ Sigma @ g.transpose(0, 2, 1)
        return symmetrize(extra)

    def initial_cov(self) -> np.ndarray:
        z = np.zeros((self.layout.dim, self.layout.dim))
        x = self.layout.x()
        z[np.ix_(x, x)] = self.model.P0
        return z

    def clean_covariances(self) -> np.ndarray:
        """``cov Z(t)`` for t = 0..T with no attack."""
        out = np.empty((self.T + 1, self.layout.dim, self.layout.dim))
        out[0] = self.initial_cov()
        for t in range(1, self.T + 1):
            out[t] = symmetrize(self.Phi[t] @ out[t - 1] @ self.Phi[t].T + self.W_clean[t])
        return out

    def attacked_covariances(self, attacked: int, Sigma: np.ndarray, onset: int, clean=None):
        """``cov Z(t)`` for t = 0..T with the attack live from ``onset``."""
        clean = self.clean_covariances() if clean is None else clean
        extra = self.attack_noise(attacked, Sigma)
        out = clean.copy()
        for t in range(max(onset, 1), self.T + 1):
            out[t] = symmetrize(
                self.Phi[t] @ out[t - 1] @ self.Phi[t].T + self.W_clean[t] + extra[t]
            )
        return out


@dataclass
class AttackContext:
    """Which sensor is hypothesised attacked and from when (``None`` = clean)."""

    attacked: int | None = None
    onset: int | None = None
    Sigma: np.ndarray | None = None

    def __post_init__(self):
        if (self.attacked is None) != (self.onset is None):
            raise ValueError("onset must be given iff an attacked sensor is")

    def active(self, t: int) -> bool:
        return self.attacked is not None and t >= self.onset


@dataclass
class MomentSet:
    """Joint covariance of one view at time ``t`` with named accessors."""

    dynamics: ViewDynamics
    t: int
    cov: np.ndarray

    @property
    def layout(self) -> Layout:
        return self.dynamics.layout

    def _blk(self, a, b) -> np.ndarray:
        return self.cov[np.ix_(a, b)]

    @property
    def B(self) -> np.ndarray:
        lay = self.layout
        return self._blk(lay.x(), lay.x())

    def L(self, i: int) -> np.ndarray:
        lay = self.layout
        return self._blk(lay.xhat(i), lay.xhat(i))

    def H(self, i: int) -> np.ndarray:
        """cov(xhat_i, x)."""
        lay = self.layout
        return self._blk(lay.xhat(i), lay.x())

    def T(self, i: int, j: int) -> np.ndarray:
        lay = self.layout
        return self._blk(lay.xhat(i), lay.xhat(j))

    def J(self, i: int, j: int) -> np.ndarray:
        """cov(xhat_i(t), xhat_j(t-1))."""
        lay = self.layout
        return self._blk(lay.xhat(i, 0), lay.xhat(j, 1))

    def helpers(self, i: int):
        return helper_matrices(self.dynamics.model, self.dynamics.schedule, i, self.t)


def initial_moments(dynamics: ViewDynamics) -> MomentSet:
    """``B(0) = P0``, every estimate-related block zero."""
    return MomentSet(dynamics, 0, dynamics.initial_cov())


def update_unconditional_moments(prev: MomentSet, attack: AttackContext | None = None) -> MomentSet:
    """Advance a view's joint covariance by one round."""
    dyn = prev.dynamics
    t = prev.t + 1
    if t > dyn.T:
        raise ValueError("gain schedule exhausted")
    W = dyn.W_clean[t]
    if attack is not None and attack.active(t):
        W = W + dyn.attack_noise(attack.attacked, attack.Sigma)[t]
    cov = symmetrize(dyn.Phi[t] @ prev.cov @ dyn.Phi[t].T + W)
    if not np.all(np.isfinite(cov)):
        raise FloatingPointError(f"non-finite moment at t={t}")
    return MomentSet(dyn, t, cov)


def _conditional(moments: MomentSet, kind: str, r: np.ndarray, neighbor=None):
    tgt, cond = factor_indices(moments.layout, kind, neighbor)
    r = np.asarray(r, dtype=float)
    if r.shape != (cond.size,):
        raise ValueError(f"conditioning vector must have length {cond.size}")
    gain, cov = condition_joint(moments.cov, tgt, cond)
    return ConditionalGaussian(gain @ r, cov)


def cond_dist_own_estimate(moments: MomentSet, r: np.ndarray) -> ConditionalGaussian:
    """``xhat_i(t)`` given ``[xhat_i(t-1); xhat_N(t-1); y_i(t)]``."""
    return _conditional(moments, OWN, r)


def cond_dist_neighbor_estimate(moments: MomentSet, neighbor: int, r: np.ndarray) -> ConditionalGaussian:
    """``xhat_j(t-1)`` given ``[xhat_j(t-2); xhat_i(t-1); y_i(t)]``.

    ``moments`` should come from :func:`pair_view` so that ``j``'s other
    neighbours are ignored.
    """
    return _conditional(moments, NBR, r, neighbor)


def cond_dist_observation(moments: MomentSet, r: np.ndarray) -> ConditionalGaussian:
    """``y_i(t)`` given ``[xhat_i(t-1); xhat_N(t-2); y_i(t-1)]``."""
    return _conditional(moments, OBS, r)


def post_attack_variants(
    dynamics: ViewDynamics,
    attack: AttackContext,
    t: int,
    r_own: np.ndarray,
    r_obs: np.ndarray,
    neighbor: int | None = None,
    r_nbr: np.ndarray | None = None,
) -> dict:
    """Attacked conditional densities at time ``t`` for one onset hypothesis.

    With ``onset > t`` (or Sigma = 0) these equal the clean variants.
    """
    m = initial_moments(dynamics)
    for _ in range(t):
        m = update_unconditional_moments(m, attack)
    out = {OWN: cond_dist_own_estimate(m, r_own), OBS: cond_dist_observation(m, r_obs)}
    if neighbor is not None:
        out[NBR] = cond_dist_neighbor_estimate(m, neighbor, r_nbr)
    return out


# ---------------------------------------------------------------------------
# Precomputed density tables
# ---------------------------------------------------------------------------


@dataclass
class FactorTable:
    """Conditional-density parameters of one factor for every t (and onset age).

    Clean: ``gain0[t]``, ``white0[t]``, ``logdet0[t]``.
    Attacked, per hypothesis key ``h``: ``gain[h][t, a]`` etc. for onset
    ``t - a``; ``valid[t, a]`` is False where ``t - a < 1``.
    """

    kind: str
    view: View
    neighbor: int | None
    gain0: np.ndarray
    white0: np.ndarray
    logdet0: np.ndarray
    gain: dict = field(default_factory=dict)
    white: dict = field(default_factory=dict)
    logdet: dict = field(default_factory=dict)
    valid: np.ndarray | None = None

    def data(self, xhat, y):
        return factor_data(self.kind, self.view, xhat, y, self.neighbor)

    def _operator(self, key):
        """Stacked ``[W, -W K]`` so that ``e = op @ [target; r]``, cached per key.

        Returns ``(op, logdet)`` with ``op`` of shape ``(T+1, A*k, k+r)``.
        """
        cache = self.__dict__.setdefault("_ops", {})
        if key not in cache:
            if key is None:
                w, g, ld = self.white0[:, None], self.gain0[:, None], self.logdet0[:, None]
            else:
                w, g, ld = self.white[key], self.gain[key], self.logdet[key]
            op = np.concatenate([w, -w @ g], axis=-1)
            T1, A, k, m = op.shape
            cache[key] = (np.ascontiguousarray(op.reshape(T1, A * k, m).transpose(0, 2, 1)), ld)
        return cache[key]

    def _logpdf(self, key, tgt, r):
        op, logdet = self._operator(key)
        T1 = tgt.shape[-2]
        if T1 > op.shape[0]:
            raise ValueError("data horizon exceeds the table horizon")
        op, logdet = op[:T1], logdet[:T1]
        k = tgt.shape[-1]
        u = np.concatenate([tgt, r], axis=-1)
        lead = u.shape[:-2]
        u = np.moveaxis(u.reshape((-1,) + u.shape[-2:]), 1, 0)  # (T+1, B, k+r)
        e = (u @ op).reshape(u.shape[:2] + (-1, k))  # (T+1, B, A, k)
        quad = np.moveaxis(np.einsum("tbak,tbak->tba", e, e), 1, 0)
        out = -0.5 * (k * np.log(2 * np.pi) + logdet + quad)
        return out.reshape(lead + out.shape[1:])

    def clean_logpdf(self, tgt: np.ndarray, r: np.ndarray) -> np.ndarray:
        """``(..., T+1)`` log-densities under no attack; entry 0 is 0."""
        out = self._logpdf(None, tgt, r)[..., 0]
        out[..., 0] = 0.0
        return _floor(out)

    def attacked_logpdf(self, key, tgt: np.ndarray, r: np.ndarray) -> np.ndarray:
        """``(..., T+1, n_ages)`` log-densities; invalid entries are -inf."""
        valid = self.valid[: tgt.shape[-2]]
        out = _floor(np.where(valid, self._logpdf(key, tgt, r), 0.0))
        return np.where(valid, out, -np.inf)


def _floor(vals: np.ndarray) -> np.ndarray:
    from .gaussian import LOG_DENSITY_FLOOR

    bad = ~np.isfinite(vals)
    if np.any(bad):
        log.warning("%d non-finite log-densities floored", int(bad.sum()))
        vals = np.where(bad, LOG_DENSITY_FLOOR, vals)
    return np.maximum(vals, LOG_DENSITY_FLOOR)


def _condition_stack(covs: np.ndarray, tgt, cond):
    """Gain, whitening factor and log-determinant of one factor, batched.

    A target that is a deterministic zero (the filter's start value), or a
    deterministic function of the conditioning vector (two nodes with the
    same closed neighbourhood hold identical estimates), gets a unit
    placeholder covariance and zero gain.  It then contributes the same
    constant to pre- and post-change densities, so ratios are unaffected.
    """
    gain, cov = condition_joint(covs, tgt, cond)
    prior = np.trace(covs[..., tgt[:, None], tgt[None, :]], axis1=-2, axis2=-1)
    post = np.trace(cov, axis1=-2, axis2=-1)
    dead = (prior == 0.0) | (post <= DEGENERATE_RTOL * prior)
    if np.any(dead):
        cov = np.where(dead[..., None, None], np.eye(tgt.size), cov)
        gain = np.where(dead[..., None, None], 0.0, gain)
    white, logdet = whitening(cov)
    return gain, white, logdet


def build_factor_tables(
    dynamics: ViewDynamics,
    factors: list,
    hypotheses: dict,
    n_ages: int,
) -> list:
    """Density tables for ``factors`` (list of ``(kind, neighbor)``) in one view.

    ``hypotheses`` maps a key to ``(attacked_node, Sigma)``.  For each key the
    attacked joint covariance is propagated for every onset ``m`` and age
    ``a = t - m < n_ages`` in one batched pass.
    """
    T = dynamics.T
    lay = dynamics.layout
    clean = dynamics.clean_covariances()
    idx = [factor_indices(lay, kind, nb) for kind, nb in factors]
    tables = []
    for (kind, nb), (tgt, cond) in zip(factors, idx):
        g0, w0, ld0 = _condition_stack(clean, tgt, cond)
        tables.append(FactorTable(kind, dynamics.view, nb, g0, w0, ld0))
    t_grid = np.arange(T + 1)[:, None] - np.arange(n_ages)[None, :]
    valid = t_grid >= 1
    for tab in tables:
        tab.valid = valid
    for key, (attacked, Sigma) in hypotheses.items():
        extra = dynamics.attack_noise(attacked, np.atleast_2d(Sigma))
        W = dynamics.W_clean + extra
        per = [
            (
                np.zeros((T + 1, n_ages) + (tgt.size, cond.size)),
                np.tile(np.eye(tgt.size), (T + 1, n_ages, 1, 1)),
                np.zeros((T + 1, n_ages)),
            )
            for tgt, cond in idx
        ]
        # cur[m-1] is the covariance at time m + a for onset m
        onsets = np.arange(1, T + 1)
        cur = clean[onsets - 1]
        for a in range(n_ages):
            times = onsets + a
            keep = times <= T
            if not np.any(keep):
                break
            times, cur, onsets = times[keep], cur[keep], onsets[keep]
            ph = dynamics.Phi[times]
            cur = symmetrize(ph @ cur @ ph.transpose(0, 2, 1) + W[times])
            for (tgt, cond), (g, w, ld) in zip(idx, per):
                gg, ww, ll = _condition_stack(cur, tgt, cond)
                g[times, a], w[times, a], ld[times, a] = gg, ww, ll
        for tab, (g, w, ld) in zip(tables, per):
            tab.gain[key], tab.white[key], tab.logdet[key] = g, w, ld
    return tables


def innovation_covariances(model: SystemModel, schedule: GainSchedule, i: int) -> np.ndarray:
    """Exact ``cov z_i(t)`` for ``z_i(t) = y_i(t) - C_i A xhat_i(t-1)``, t = 0..T.

    Computed on the global view, so no locality approximation is involved.
    """
    dyn = ViewDynamics(model, schedule, global_view(model, i))
    lay = dyn.layout
    covs = dyn.clean_covariances()
    E = np.zeros((model.q, lay.dim))
    E[:, lay.y(0)] = np.eye(model.q)
    E[:, lay.xhat(i, 1)] = -model.sensors[i].C @ model.A
    return symmetrize(E @ covs @ E.T)


def gaussian_logpdf_check(x, mean, cov) -> float:
    """Dense log-density (used by validation utilities)."""
    return gaussian_logpdf(x, mean, cov)
