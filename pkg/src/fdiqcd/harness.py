"""Monte Carlo experiment orchestration.

Detector statistics never depend on the threshold, so every experiment
simulates its paths once, computes statistic traces, and derives stopping
times for any threshold afterwards.  Paths are drawn from independent seed
streams (``default_rng([seed, stream, trial])``) so that calibration and
evaluation never share randomness and any single trial can be replayed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bayes_qcd import BayesNodeModel, first_crossing, log_lambda_trace, pi_trace
from .config import ExperimentConfig
from .kcif import compute_gain_schedule, run_network
from .nonbayes_qcd import (
    Chi2Model,
    OwnLlrModel,
    msprt_trace,
    window_size,
    wlglr_trace,
)
from .sim_core import (
    AttackModel,
    SystemModel,
    adjacency_from_edges,
    generate_trajectory,
    random_model,
    sample_attack_onset,
)

log = logging.getLogger(__name__)

STREAMS = {"bayes_calib": 1, "bayes_eval": 2, "null": 3, "attack": 4, "single": 5}
CHUNK = 250
CSV_HEADER = [
    "target",
    "achieved",
    "mean_delay",
    "threshold",
    "detector",
    "node",
    "detection_rate",
    "misidentification",
    "trials",
]


# ---------------------------------------------------------------------------
# Records and metrics
# ---------------------------------------------------------------------------


@dataclass
class TrialRecord:
    """Outcome of one path.  ``outcomes[(node, detector)] = (stop, identified)``.

    ``stop`` and ``identified`` are ``None`` when the detector never fired.
    """

    trial: int
    onset: int | None
    target: int
    horizon: int
    outcomes: dict = field(default_factory=dict)

    def false_alarm(self, node: int, detector: str) -> bool:
        stop = self.outcomes[(node, detector)][0]
        if stop is None:
            return False
        return self.onset is None or stop < self.onset


@dataclass
class MetricSummary:
    node: int
    detector: str
    trials: int
    mean_delay: float | None
    pfa: float
    misidentification: float | None
    detection_rate: float
    threshold: float | None = None
    far: float | None = None
    censored_fraction: float | None = None


def aggregate_metrics(records: list, node: int, detector: str, threshold=None) -> MetricSummary:
    """Delay over detected, non-false-alarm paths; PFA; misidentification.

    The delay is ``None`` when no path qualifies.
    """
    if not records:
        raise ValueError("no records to aggregate")
    delays, fa, wrong, attacked = [], 0, 0, 0
    for rec in records:
        stop, ident = rec.outcomes[(node, detector)]
        if rec.false_alarm(node, detector):
            fa += 1
            continue
        if rec.onset is None or rec.onset > rec.horizon:
            continue
        attacked += 1
        if stop is not None:
            delays.append(stop - rec.onset)
            if ident is not None and ident != rec.target:
                wrong += 1
    n = len(records)
    mis = wrong / len(delays) if delays and detector != "chi2" else None
    return MetricSummary(
        node=node,
        detector=detector,
        trials=n,
        mean_delay=float(np.mean(delays)) if delays else None,
        pfa=fa / n,
        misidentification=mis,
        detection_rate=len(delays) / attacked if attacked else 0.0,
        threshold=threshold,
    )


def run_length_far(stops: np.ndarray, horizon: int):
    """``(FAR, censored fraction)`` with FAR = 1 / mean run length censored at ``horizon``."""
    stops = np.asarray(stops)
    censored = stops < 0
    run = np.where(censored, horizon, stops)
    return 1.0 / float(np.mean(run)), float(np.mean(censored))


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------


def pre_onset_maxima(stat: np.ndarray, onsets: np.ndarray) -> np.ndarray:
    """``max_{1 <= t < onset} stat[t]`` per path (``-inf`` if empty).

    A path raises a false alarm at threshold ``b`` iff this value is ``>= b``.
    ``onsets`` beyond the horizon cover the whole path.
    """
    T = stat.shape[-1] - 1
    run = np.maximum.accumulate(np.where(np.isfinite(stat), stat, -np.inf), axis=-1)
    idx = np.clip(np.asarray(onsets) - 1, 0, T)
    out = run[np.arange(stat.shape[0]), idx]
    return np.where(idx >= 1, out, -np.inf)


def calibrate_threshold(
    false_alarm,
    n_trials: int,
    alpha: float,
    a0: float = 1.0,
    init: float = 0.5,
    lower: float | None = None,
    upper: float | None = None,
    offset: float = 0.0,
) -> np.ndarray:
    """Online stochastic-gradient threshold update.

    ``Lambda(j) = Lambda(j-1) + a(j) * (1_FA(j) - alpha)`` with
    ``a(j) = a0 / (j + offset)``, where
    ``false_alarm(j, Lambda(j-1))`` reports whether path ``j`` (1-based)
    raises a false alarm under the current threshold.  Iterates are
    projected onto ``[lower, upper]``.  Returns the trace ``Lambda(0..n)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    trace = np.empty(n_trials + 1)
    trace[0] = init
    lam = init
    for j in range(1, n_trials + 1):
        ind = 1.0 if false_alarm(j, lam) else 0.0
        lam = lam + a0 / (j + offset) * (ind - alpha)
        if lower is not None:
            lam = max(lam, lower)
        if upper is not None:
            lam = min(lam, upper)
        trace[j] = lam
    return trace


def threshold_for_arl(stat: np.ndarray, horizon: int, arl_target: float, iters: int = 80) -> float:
    """Smallest threshold whose horizon-censored mean run length reaches ``arl_target``."""
    finite = stat[np.isfinite(stat)]
    lo, hi = float(finite.min()) - 1.0, float(finite.max()) + 1.0

    def arl(b):
        return 1.0 / run_length_far(first_crossing(stat, b), horizon)[0]

    if arl(hi) < arl_target:
        log.warning("ARL target %.1f unreachable with horizon %d", arl_target, horizon)
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if arl(mid) >= arl_target:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Experiment: model, detector banks, path batches
# ---------------------------------------------------------------------------


@dataclass
class PathBatch:
    xhat: np.ndarray  # (n, T+1, N, p)
    y: np.ndarray  # (n, T+1, N, q), y[:, 0] = 0
    onsets: np.ndarray  # (n,), horizon + 1 encodes "no attack in window"
    target: int
    horizon: int

    def __len__(self):
        return self.xhat.shape[0]

    def onset_of(self, k: int):
        o = int(self.onsets[k])
        return None if o > self.horizon else o


def build_model(cfg: ExperimentConfig) -> SystemModel:
    mc = cfg.model
    adj = adjacency_from_edges(mc.n_nodes, [tuple(e) for e in mc.edges])
    rng = np.random.default_rng([mc.seed])
    return random_model(
        adj, mc.p, mc.q, rng, min_eig=mc.min_eig, max_spectral_radius=mc.max_spectral_radius
    )


class Experiment:
    """Model, gain schedule and lazily built detector banks for one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = build_model(cfg)
        b, nb = cfg.bayes, cfg.nonbayes
        self.horizon = max(b.horizon, nb.null_horizon, nb.attack_horizon)
        self.schedule = compute_gain_schedule(
            self.model, self.horizon, cfg.model.gain_mode, cfg.model.gamma
        )
        q = self.model.q
        self.Sigma = cfg.attack.sigma_scale * np.eye(q)
        self.grid = [s * np.eye(q) for s in cfg.detectors.theta_scales]
        self._cache = {}

    # -- detector banks ----------------------------------------------------

    def windows(self) -> list:
        d = self.cfg.detectors
        return sorted({window_size(g, d.window_scale) for g in self.cfg.nonbayes.arl_targets})

    def bayes_model(self, node: int) -> BayesNodeModel:
        key = ("bayes", node)
        if key not in self._cache:
            d = self.cfg.detectors
            hyps = None if d.bayes_include_self else tuple(
                j for j in range(self.model.n_nodes) if j != node
            )
            self._cache[key] = BayesNodeModel(
                self.model,
                self.schedule,
                node,
                self.Sigma,
                self.cfg.attack.rho,
                onset_window=d.onset_window,
                hypotheses=hyps,
                radius=d.locality_radius,
            )
        return self._cache[key]

    def chi2_model(self, node: int) -> Chi2Model:
        key = ("chi2", node)
        if key not in self._cache:
            self._cache[key] = Chi2Model(self.model, self.schedule, node, self.cfg.detectors.chi2_window)
        return self._cache[key]

    def llr_model(self, node: int, include_self: bool) -> OwnLlrModel:
        """Own-factor tables over the grid plus the true Sigma (appended if absent)."""
        key = ("llr", node, include_self)
        if key not in self._cache:
            thetas = list(self.grid)
            if not any(np.allclose(t, self.Sigma) for t in thetas):
                thetas.append(self.Sigma)
            n_ages = max(self.windows()) + 1
            self._cache[key] = OwnLlrModel(
                self.model,
                self.schedule,
                node,
                thetas,
                n_ages,
                include_self=include_self,
                radius=self.cfg.detectors.locality_radius,
            )
        return self._cache[key]

    def _sigma_index(self, om: OwnLlrModel) -> int:
        return next(k for k, t in enumerate(om.thetas) if np.allclose(t, self.Sigma))

    # -- simulation --------------------------------------------------------

    def simulate(self, stream: str, n: int, horizon: int, onset="geometric", target=None) -> PathBatch:
        """``n`` paths from one seed stream; ``onset`` is 'geometric', an int, or None."""
        target = self.cfg.attack.target if target is None else target
        sid = STREAMS[stream]
        ys, onsets = [], []
        for k in range(n):
            rng = np.random.default_rng([self.cfg.seed, sid, k])
            if onset == "geometric":
                tau = sample_attack_onset(self.cfg.attack.rho, rng)
            else:
                tau = onset
            sigma = self.Sigma if tau is not None else np.zeros_like(self.Sigma)
            att = AttackModel(target, tau, sigma)
            traj = generate_trajectory(self.model, att, horizon, rng, seed=(self.cfg.seed, sid, k))
            ys.append(traj.padded_observations())
            onsets.append(horizon + 1 if tau is None else min(tau, horizon + 1))
        y = np.stack(ys)
        xhat = run_network(self.model, self.schedule, y[:, 1:])
        return PathBatch(xhat, y, np.asarray(onsets), target, horizon)

    # -- statistic traces --------------------------------------------------

    def traces(self, node: int, batch: PathBatch, detectors=None) -> dict:
        """Statistic and identification traces keyed by ``(detector, window)``.

        Identification traces hold sensor indices (``-1`` for chi-square).
        """
        dets = list(self.cfg.detectors.names if detectors is None else detectors)
        parts = []
        for s in range(0, len(batch), CHUNK):
            sl = slice(s, s + CHUNK)
            parts.append(self._chunk_traces(node, batch.xhat[sl], batch.y[sl], dets))
        return {k: tuple(np.concatenate([p[k][m] for p in parts]) for m in range(2)) for k in parts[0]}

    def _chunk_traces(self, node, xhat, y, dets) -> dict:
        out = {}
        if "bayes" in dets:
            bm = self.bayes_model(node)
            ll = log_lambda_trace(bm.log_ratio_trace(xhat, y), self.cfg.attack.rho)
            pi, best = pi_trace(ll)
            out[("bayes", None)] = (pi, np.asarray(bm.hypotheses)[best])
        if "chi2" in dets:
            st = self.chi2_model(node).trace(xhat, y)
            out[("chi2", None)] = (st, np.full(st.shape, -1))
        d = self.cfg.detectors
        for name, incl in (("msprt", d.msprt_include_self), ("wlglr", d.glr_include_self)):
            if name not in dets:
                continue
            om = self.llr_model(node, incl)
            llr = om.llr_table(xhat, y)
            hyp = np.asarray(om.hyp_nodes)
            for w in self.windows():
                if name == "msprt":
                    st, j, _ = msprt_trace(llr, w, self._sigma_index(om))
                else:
                    grid_idx = list(range(len(self.grid)))
                    st, j, _ = wlglr_trace(llr[..., grid_idx], w)
                out[(name, w)] = (st, hyp[j])
        return out


# ---------------------------------------------------------------------------
# Single trial
# ---------------------------------------------------------------------------


def run_trial(exp: Experiment, thresholds: dict, trial: int, stream: str = "single",
              onset="geometric", horizon: int | None = None) -> TrialRecord:
    """Simulate one path and run every detector in ``thresholds``.

    ``thresholds`` maps ``(node, detector)`` to a threshold; MSPRT and WL-GLR
    use the widest configured window.
    """
    horizon = exp.cfg.bayes.horizon if horizon is None else horizon
    batch = _single_batch(exp, stream, trial, horizon, onset)
    rec = TrialRecord(trial, batch.onset_of(0), batch.target, horizon)
    w = max(exp.windows())
    for node in sorted({n for n, _ in thresholds}):
        dets = [d for n, d in thresholds if n == node]
        tr = exp.traces(node, batch, dets)
        for det in dets:
            stat, ident = tr[(det, None if det in ("bayes", "chi2") else w)]
            stop = int(first_crossing(stat[0], thresholds[(node, det)]))
            if stop < 0:
                rec.outcomes[(node, det)] = (None, None)
            else:
                who = int(ident[0, stop])
                rec.outcomes[(node, det)] = (stop, who if who >= 0 else None)
    return rec


def _single_batch(exp: Experiment, stream: str, trial: int, horizon: int, onset) -> PathBatch:
    sid = STREAMS[stream]
    rng = np.random.default_rng([exp.cfg.seed, sid, trial])
    tau = sample_attack_onset(exp.cfg.attack.rho, rng) if onset == "geometric" else onset
    sigma = exp.Sigma if tau is not None else np.zeros_like(exp.Sigma)
    traj = generate_trajectory(exp.model, AttackModel(exp.cfg.attack.target, tau, sigma), horizon, rng)
    y = traj.padded_observations()[None]
    xhat = run_network(exp.model, exp.schedule, y[:, 1:])
    o = horizon + 1 if tau is None else min(tau, horizon + 1)
    return PathBatch(xhat, y, np.asarray([o]), exp.cfg.attack.target, horizon)


def records_from_traces(batch: PathBatch, node: int, detector: str, stat, ident, threshold) -> list:
    stops = first_crossing(stat, threshold)
    recs = []
    for k in range(len(batch)):
        s = int(stops[k])
        out = (None, None) if s < 0 else (s, int(ident[k, s]) if ident[k, s] >= 0 else None)
        recs.append(TrialRecord(k, batch.onset_of(k), batch.target, batch.horizon, {(node, detector): out}))
    return recs


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    target: float
    achieved: float
    mean_delay: float | None
    threshold: float
    detector: str
    node: int
    detection_rate: float
    misidentification: float | None
    trials: int


def bayes_sweep(exp: Experiment, alphas=None, nodes=None, detectors=("bayes", "chi2")) -> tuple:
    """Calibrate on one stream, evaluate on another, for each alpha.

    Returns ``(rows, calibration_traces)``; the traces are keyed by
    ``(node, detector, alpha)``.
    """
    cfg = exp.cfg
    alphas = list(cfg.bayes.alphas if alphas is None else alphas)
    if not alphas:
        raise ValueError("empty alpha grid")
    nodes = list(cfg.detectors.nodes if nodes is None else nodes)
    dets = [d for d in detectors if d in cfg.detectors.names]
    T = cfg.bayes.horizon
    calib = exp.simulate("bayes_calib", cfg.bayes.trials, T)
    evalb = exp.simulate("bayes_eval", cfg.bayes.eval_trials, T)
    rows, traces = [], {}
    for node in nodes:
        tc = exp.traces(node, calib, dets)
        te = exp.traces(node, evalb, dets)
        for det in dets:
            key = (det, None)
            pre = pre_onset_maxima(tc[key][0], calib.onsets)
            if det == "bayes":
                b = cfg.bayes
                a0, init, off, lo, hi = b.a0, b.init_threshold, b.step_offset, 0.0, 1.0
            else:
                b = cfg.bayes
                a0, init, off, lo, hi = b.a0_chi2, b.init_threshold_chi2, b.step_offset_chi2, 0.0, None
            for alpha in alphas:
                tr = calibrate_threshold(
                    lambda j, lam: pre[j - 1] >= lam, len(calib), alpha, a0, init, lo, hi, off
                )
                traces[(node, det, alpha)] = tr
                thr = float(tr[-1])
                recs = records_from_traces(evalb, node, det, *te[key], thr)
                m = aggregate_metrics(recs, node, det, thr)
                rows.append(SweepRow(alpha, m.pfa, m.mean_delay, thr, det, node,
                                     m.detection_rate, m.misidentification, m.trials))
    return rows, traces


def nonbayes_sweep(exp: Experiment, arl_targets=None, nodes=None, detectors=("msprt", "wlglr", "chi2")) -> list:
    """Thresholds matched to ARL targets on no-attack paths, delays on attacked paths."""
    cfg = exp.cfg
    nb = cfg.nonbayes
    targets = list(nb.arl_targets if arl_targets is None else arl_targets)
    if not targets:
        raise ValueError("empty ARL grid")
    nodes = list(cfg.detectors.nodes if nodes is None else nodes)
    dets = [d for d in detectors if d in cfg.detectors.names]
    null = exp.simulate("null", nb.null_trials, nb.null_horizon, onset=None)
    att = exp.simulate("attack", nb.attack_trials, nb.attack_horizon, onset=nb.attack_onset)
    rows = []
    for node in nodes:
        t0 = exp.traces(node, null, dets)
        t1 = exp.traces(node, att, dets)
        for det in dets:
            for g in targets:
                key = (det, None) if det == "chi2" else (det, window_size(g, cfg.detectors.window_scale))
                thr = threshold_for_arl(t0[key][0], nb.null_horizon, g)
                far, _ = run_length_far(first_crossing(t0[key][0], thr), nb.null_horizon)
                recs = records_from_traces(att, node, det, *t1[key], thr)
                recs = [r for r in recs if not r.false_alarm(node, det)]
                m = aggregate_metrics(recs, node, det, thr) if recs else None
                rows.append(SweepRow(
                    float(g), far, None if m is None else m.mean_delay, thr, det, node,
                    0.0 if m is None else m.detection_rate,
                    None if m is None else m.misidentification, len(recs),
                ))
    return rows


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_HEADER])
    return buf.getvalue()


def write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def run_metadata(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "gain_mode": cfg.model.gain_mode,
        "gamma": cfg.model.gamma,
        "versions": {
            "fdiqcd": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "config": cfg.to_dict(),
    }


def write_metadata(outdir: Path, cfg: ExperimentConfig, command: str):
    write_text(outdir / "run_metadata.json", json.dumps(run_metadata(cfg, command), indent=2, sort_keys=True) + "\n")


FIGURE_FILES = {
    "delay_vs_pfa": ("bayes", "chi2"),
    "threshold_vs_pfa": ("bayes",),
    "delay_vs_far_known": ("msprt", "chi2"),
    "delay_vs_far_unknown": ("wlglr", "chi2"),
}


def sweep_and_emit(cfg: ExperimentConfig, outdir, exp: Experiment | None = None) -> dict:
    """Run both sweeps and write one CSV per figure plus run metadata.

    Returns the rows written, keyed by file stem.
    """
    outdir = Path(outdir)
    exp = Experiment(cfg) if exp is None else exp
    names = cfg.detectors.names
    out = {}
    brows = []
    if any(d in names for d in ("bayes", "chi2")):
        brows, _ = bayes_sweep(exp)
    nrows = []
    if any(d in names for d in ("msprt", "wlglr")):
        nrows = nonbayes_sweep(exp)
    for stem, dets in FIGURE_FILES.items():
        src = brows if stem.endswith("pfa") else nrows
        rows = [r for r in src if r.detector in dets]
        if not rows:
            continue
        write_text(outdir / f"{stem}.csv", rows_to_csv(rows))
        out[stem] = rows
    write_metadata(outdir, cfg, "sweep")
    return out
