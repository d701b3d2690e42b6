"""Command-line entry point: ``fdiqcd {simulate,calibrate,sweep,validate}``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DETECTORS, ExperimentConfig, dump_config, load_config
from .harness import (
    PathBatch,
    STREAMS,
    Experiment,
    _fmt,
    bayes_sweep,
    rows_to_csv,
    sweep_and_emit,
    write_metadata,
    write_text,
)
from .sim_core import AttackModel, generate_trajectory, sample_attack_onset
from .kcif import run_network

log = logging.getLogger("fdiqcd")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Return a new config with command-line overrides applied."""
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.detectors:
        d["detectors"]["names"] = [s.strip() for s in args.detectors.split(",") if s.strip()]
    if args.nodes:
        d["detectors"]["nodes"] = [int(s) for s in args.nodes.split(",")]
    if args.trials is not None:
        d["bayes"]["trials"] = d["bayes"]["eval_trials"] = args.trials
        d["nonbayes"]["null_trials"] = d["nonbayes"]["attack_trials"] = args.trials
    if args.horizon is not None:
        d["bayes"]["horizon"] = args.horizon
        d["nonbayes"]["null_horizon"] = args.horizon
        d["nonbayes"]["attack_horizon"] = args.horizon
        d["nonbayes"]["attack_onset"] = min(d["nonbayes"]["attack_onset"], args.horizon)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, outdir: Path, trial: int = 0) -> dict:
    """One path: trajectory, KCIF estimates and every detector trace."""
    exp = Experiment(cfg)
    T = cfg.bayes.horizon
    rng = np.random.default_rng([cfg.seed, STREAMS["single"], trial])
    tau = sample_attack_onset(cfg.attack.rho, rng)
    att = AttackModel(cfg.attack.target, tau, exp.Sigma)
    traj = generate_trajectory(exp.model, att, T, rng)
    y = traj.padded_observations()
    xhat = run_network(exp.model, exp.schedule, y[None, 1:])[0]

    n, p, q = exp.model.n_nodes, exp.model.p, exp.model.q
    header = ["t"] + [f"x{a}" for a in range(p)]
    header += [f"y{i}_{b}" for i in range(n) for b in range(q)]
    rows = [[t] + list(traj.states[t]) + list(y[t].ravel()) for t in range(T + 1)]
    files = {"trajectory.csv": _csv(header, rows)}

    header = ["t", "node"] + [f"xhat{a}" for a in range(p)]
    rows = [[t, i] + list(xhat[t, i]) for t in range(T + 1) for i in range(n)]
    files["estimates.csv"] = _csv(header, rows)

    batch = PathBatch(xhat[None], y[None], np.asarray([min(tau, T + 1)]), cfg.attack.target, T)
    rows = []
    for node in cfg.detectors.nodes:
        for (det, w), (stat, ident) in sorted(exp.traces(node, batch).items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
            for t in range(1, T + 1):
                who = int(ident[0, t])
                rows.append([t, node, det, w, float(stat[0, t]), who if who >= 0 else None])
    files["traces.csv"] = _csv(["t", "node", "detector", "window", "statistic", "identified"], rows)
    files["onset.csv"] = _csv(["onset", "target"], [[tau, cfg.attack.target]])
    for name, text in files.items():
        write_text(outdir / name, text)
    write_metadata(outdir, cfg, "simulate")
    return files


def cmd_calibrate(cfg: ExperimentConfig, outdir: Path) -> dict:
    """Online threshold calibration; writes traces and evaluated results."""
    exp = Experiment(cfg)
    dets = [d for d in ("bayes", "chi2") if d in cfg.detectors.names]
    if not dets:
        raise SystemExit("calibrate needs bayes or chi2 among the detectors")
    rows, traces = bayes_sweep(exp, detectors=dets)
    trace_rows = []
    for (node, det, alpha), tr in sorted(traces.items()):
        for j, lam in enumerate(tr):
            trace_rows.append([node, det, alpha, j, float(lam)])
    files = {
        "calibration.csv": rows_to_csv(rows),
        "calibration_trace.csv": _csv(["node", "detector", "alpha", "j", "threshold"], trace_rows),
    }
    for name, text in files.items():
        write_text(outdir / name, text)
    write_metadata(outdir, cfg, "calibrate")
    return files


def cmd_validate(cfg: ExperimentConfig, outdir: Path, full: bool = False) -> bool:
    from .validation import run_all

    results = run_all(full=full, seed=cfg.seed)
    rows = []
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        rows.append([r.name, "pass" if r.passed else "fail", r.value, r.tolerance])
    write_text(outdir / "validation.csv", _csv(["check", "status", "value", "tolerance"], rows))
    return all(r.passed for r in results)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--outdir", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--detectors", help=f"comma list from {','.join(DETECTORS)}")
    common.add_argument("--nodes", help="comma list of detecting nodes (0-based)")
    common.add_argument("--trials", type=int, help="trial count for every stage")
    common.add_argument("--horizon", type=int, help="horizon for every stage")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fdiqcd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="one trial, dump traces")
    sim.add_argument("--trial", type=int, default=0, help="trial index in the single stream")
    sub.add_parser("calibrate", parents=[common], help="online threshold calibration")
    sub.add_parser("sweep", parents=[common], help="figure sweeps to CSV")
    val = sub.add_parser("validate", parents=[common], help="run oracle suites")
    val.add_argument("--full", action="store_true", help="full-size Monte Carlo oracles")
    dc = sub.add_parser("dump-config", parents=[common], help="write the effective config")
    dc.set_defaults(command="dump-config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.outdir
    if args.command == "simulate":
        cmd_simulate(cfg, out, args.trial)
    elif args.command == "calibrate":
        cmd_calibrate(cfg, out)
    elif args.command == "sweep":
        sweep_and_emit(cfg, out)
    elif args.command == "validate":
        return 0 if cmd_validate(cfg, out, args.full) else 1
    elif args.command == "dump-config":
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
    return 0


if __name__ == "__main__":
    sys.exit(main())
