"""Ground-truth process, sensor observations and false-data-injection attacks.

The process is ``x(t) = A x(t-1) + w(t-1)`` with ``w ~ N(0, Q)`` and
``x(0) ~ N(0, P0)``.  Sensor ``i`` observes ``y_i(t) = C_i x(t) + v_i(t)``,
``v_i ~ N(0, R_i)``.  From the onset ``tau`` on, the attacked sensor reports
``y_i(t) + e(t)`` with ``e ~ N(0, Sigma)`` drawn i.i.d. across time.

Node indices are zero-based throughout the package: the second sensor
is node ``1`` here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .gaussian import is_psd, sample_gaussian, symmetrize

PBH_TOL = 1e-8


@dataclass
class SensorModel:
    """Observation model ``y = C x + v``, ``v ~ N(0, R)``."""

    C: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        q = self.C.shape[0]
        if self.R.shape != (q, q):
            raise ValueError(f"R must be {q}x{q}, got {self.R.shape}")
        if not is_psd(self.R) or np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be symmetric positive definite")

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.C.shape[1]


@dataclass
class SystemModel:
    """Linear-Gaussian process observed by a network of sensors.

    ``adjacency`` is a symmetric 0/1 matrix with zero diagonal; the graph
    must be connected.
    """

    A: np.ndarray
    Q: np.ndarray
    P0: np.ndarray
    sensors: list
    adjacency: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        self.adjacency = np.asarray(self.adjacency, dtype=int)
        p = self.A.shape[0]
        if self.A.shape != (p, p) or self.Q.shape != (p, p) or self.P0.shape != (p, p):
            raise ValueError("A, Q and P0 must all be p x p")
        for name, m in (("Q", self.Q), ("P0", self.P0)):
            if not is_psd(m):
                raise ValueError(f"{name} must be symmetric positive semi-definite")
        n = len(self.sensors)
        if n < 1:
            raise ValueError("need at least one sensor")
        for s in self.sensors:
            if s.p != p:
                raise ValueError("sensor C has wrong number of columns")
            if s.q != self.sensors[0].q:
                raise ValueError("all sensors must share the observation dimension q")
        adj = self.adjacency
        if adj.shape != (n, n):
            raise ValueError(f"adjacency must be {n}x{n}")
        if not np.array_equal(adj, adj.T) or np.any(np.diag(adj) != 0):
            raise ValueError("adjacency must be symmetric with zero diagonal")
        if not np.all((adj == 0) | (adj == 1)):
            raise ValueError("adjacency entries must be 0 or 1")
        if n > 1 and connected_components(adj, directed=False)[0] != 1:
            raise ValueError("sensor graph must be connected")
        for msg in structural_warnings(self):
            warnings.warn(msg, stacklevel=2)

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.sensors[0].q

    @property
    def n_nodes(self) -> int:
        return len(self.sensors)

    def neighbors(self, i: int) -> list[int]:
        """N_i, sorted."""
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def closed_neighbors(self, i: int) -> list[int]:
        """N'_i = N_i plus i itself, sorted."""
        return sorted(self.neighbors(i) + [i])

    def degree(self, i: int) -> int:
        return int(self.adjacency[i].sum())


def _pbh_rank_deficient(A: np.ndarray, B: np.ndarray, *, controllability: bool) -> bool:
    """PBH test over the unstable-or-marginal eigenvalues (stabilizability)
    or all eigenvalues (observability)."""
    p = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if controllability and abs(lam) < 1.0:
            continue
        if controllability:
            m = np.hstack([lam * np.eye(p) - A, B])
        else:
            m = np.vstack([lam * np.eye(p) - A, B])
        if np.linalg.matrix_rank(m, tol=PBH_TOL) < p:
            return True
    return False


def structural_warnings(model: SystemModel) -> list[str]:
    """Stabilizability of (A, Q^1/2) and observability of each (A, C_i)."""
    out = []
    qs = symmetrize(model.Q)
    vals, vecs = np.linalg.eigh(qs)
    q_half = vecs * np.sqrt(np.clip(vals, 0, None))
    if _pbh_rank_deficient(model.A, q_half, controllability=True):
        out.append("(A, Q^1/2) fails the PBH stabilizability test")
    for i, s in enumerate(model.sensors):
        if _pbh_rank_deficient(model.A, s.C, controllability=False):
            out.append(f"(A, C_{i}) fails the PBH observability test")
    return out


@dataclass
class AttackModel:
    """Additive Gaussian injection at one sensor from ``onset`` on.

    ``onset=None`` means the attack never starts.
    """

    target: int
    onset: int | None
    Sigma: np.ndarray

    def __post_init__(self):
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if not is_psd(self.Sigma):
            raise ValueError("Sigma must be symmetric positive semi-definite")
        if self.onset is not None and self.onset < 1:
            raise ValueError("onset must be >= 1 (or None for no attack)")
        if self.target < 0:
            raise ValueError("target must be a valid node index")

    def active(self, node: int, t: int) -> bool:
        return self.onset is not None and node == self.target and t >= self.onset

    @classmethod
    def never(cls, q: int, target: int = 0) -> "AttackModel":
        return cls(target=target, onset=None, Sigma=np.zeros((q, q)))


@dataclass
class Trajectory:
    """One simulated path.

    ``states[t]`` is ``x(t)`` for t = 0..T.  ``observations[t-1, i]`` is the
    (possibly attacked) ``y_i(t)`` for t = 1..T.
    """

    states: np.ndarray
    observations: np.ndarray
    onset: int | None
    target: int
    seed: object = None
    noise: dict = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> int:
        return self.observations.shape[0]

    def padded_observations(self) -> np.ndarray:
        """Observations indexed directly by time, with ``y(0) = 0``."""
        y = self.observations
        return np.concatenate([np.zeros((1,) + y.shape[1:]), y], axis=0)


def _check_finite(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x


def step_process(model: SystemModel, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = _check_finite(x, "x")
    if x.shape != (model.p,):
        raise ValueError(f"x must have shape ({model.p},)")
    return model.A @ x + sample_gaussian(rng, model.Q)


def observe(sensor: SensorModel, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = _check_finite(x, "x")
    if x.shape != (sensor.p,):
        raise ValueError(f"x must have shape ({sensor.p},), got {x.shape}")
    return sensor.C @ x + sample_gaussian(rng, sensor.R)


def observe_attacked(
    sensor: SensorModel,
    attack: AttackModel,
    x: np.ndarray,
    t: int,
    rng: np.random.Generator,
    node: int,
) -> np.ndarray:
    """``observe`` plus the injected error when ``attack`` is live at ``node``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    y = observe(sensor, x, rng)
    if attack.active(node, t):
        y = y + sample_gaussian(rng, attack.Sigma)
    return y


def sample_attack_onset(rho: float, rng: np.random.Generator) -> int:
    """Geometric onset on {1, 2, ...} with ``P(tau = k) = rho (1 - rho)^(k-1)``."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    return int(rng.geometric(rho))


def generate_trajectory(
    model: SystemModel,
    attack: AttackModel,
    horizon: int,
    rng: np.random.Generator,
    seed=None,
) -> Trajectory:
    """Simulate ``x(0..T)`` and every sensor's observations.

    Noise is drawn in a fixed order (x0, w, v, e) regardless of the attack,
    so two runs with the same generator state differ only where the attack
    is live.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if attack.target >= model.n_nodes:
        raise ValueError("attack target out of range")
    p, q, n = model.p, model.q, model.n_nodes
    x0 = sample_gaussian(rng, model.P0)
    w = sample_gaussian(rng, model.Q, horizon)
    v = np.stack([sample_gaussian(rng, s.R, horizon) for s in model.sensors], axis=1)
    e = sample_gaussian(rng, attack.Sigma, horizon)

    states = np.empty((horizon + 1, p))
    states[0] = x0
    for t in range(1, horizon + 1):
        states[t] = model.A @ states[t - 1] + w[t - 1]
    C = np.stack([s.C for s in model.sensors])  # (n, q, p)
    obs = np.einsum("nqp,tp->tnq", C, states[1:]) + v
    if attack.onset is not None and attack.onset <= horizon:
        obs[attack.onset - 1 :, attack.target] += e[attack.onset - 1 :]
    return Trajectory(
        states=states,
        observations=obs,
        onset=attack.onset,
        target=attack.target,
        seed=seed,
        noise={"w": w, "v": v, "e": e},
    )


# ---------------------------------------------------------------------------
# Random model construction
# ---------------------------------------------------------------------------


def make_positive_definite(m: np.ndarray, min_eig: float = 1e-3) -> np.ndarray:
    """Symmetrize, then shift by the smallest ``c I`` giving ``eig_min >= min_eig``."""
    s = symmetrize(np.asarray(m, dtype=float))
    lo = float(np.min(np.linalg.eigvalsh(s)))
    if lo < min_eig:
        s = s + (min_eig - lo) * np.eye(s.shape[0])
    return s


def random_model(
    adjacency: np.ndarray,
    p: int,
    q: int,
    rng: np.random.Generator,
    *,
    min_eig: float = 1e-3,
    max_spectral_radius: float = 0.98,
    max_draws: int = 10_000,
) -> SystemModel:
    """Draw ``A, Q, P0, C_i, R_i`` with entries uniform on [0, 1].

    ``Q``, ``P0`` and each ``R_i`` are made positive definite with
    :func:`make_positive_definite`.  ``A`` is redrawn until its spectral
    radius is below ``max_spectral_radius`` so that the unconditional
    moments stay bounded over long horizons.
    """
    adjacency = np.asarray(adjacency, dtype=int)
    n = adjacency.shape[0]
    for _ in range(max_draws):
        A = rng.uniform(0.0, 1.0, (p, p))
        if np.max(np.abs(np.linalg.eigvals(A))) < max_spectral_radius:
            break
    else:
        raise RuntimeError("could not draw a stable A")
    Q = make_positive_definite(rng.uniform(0.0, 1.0, (p, p)), min_eig)
    P0 = make_positive_definite(rng.uniform(0.0, 1.0, (p, p)), min_eig)
    sensors = []
    for _ in range(n):
        C = rng.uniform(0.0, 1.0, (q, p))
        R = make_positive_definite(rng.uniform(0.0, 1.0, (q, q)), min_eig)
        sensors.append(SensorModel(C, R))
    return SystemModel(A=A, Q=Q, P0=P0, sensors=sensors, adjacency=adjacency)


def adjacency_from_edges(n: int, edges) -> np.ndarray:
    adj = np.zeros((n, n), dtype=int)
    for a, b in edges:
        if a == b:
            raise ValueError("self loops are not allowed")
        adj[a, b] = adj[b, a] = 1
    return adj


def complete_graph(n: int) -> np.ndarray:
    return np.ones((n, n), dtype=int) - np.eye(n, dtype=int)


def line_graph(n: int) -> np.ndarray:
    return adjacency_from_edges(n, [(k, k + 1) for k in range(n - 1)])


# Five-node topology used for the reference experiments: nodes 0 and 1 are
# adjacent, degrees are (2, 3, 3, 2, 2).
REFERENCE_EDGES = [(0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4)]


def reference_topology() -> np.ndarray:
    return adjacency_from_edges(5, REFERENCE_EDGES)
