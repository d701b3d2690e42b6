import numpy as np
import pytest

from fdiqcd.bayes_qcd import first_crossing
from fdiqcd.config import ExperimentConfig
from fdiqcd.harness import (
    CSV_HEADER,
    Experiment,
    TrialRecord,
    aggregate_metrics,
    bayes_sweep,
    calibrate_threshold,
    nonbayes_sweep,
    pre_onset_maxima,
    rows_to_csv,
    run_length_far,
    run_trial,
    sweep_and_emit,
    threshold_for_arl,
)


def small_config(**over) -> ExperimentConfig:
    d = {
        "detectors": {"nodes": [0]},
        "bayes": {"trials": 40, "eval_trials": 40, "horizon": 30},
        "nonbayes": {"arl_targets": [5, 10], "null_trials": 40, "null_horizon": 60,
                     "attack_trials": 40, "attack_onset": 10, "attack_horizon": 40},
    }
    d.update(over)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def exp():
    return Experiment(small_config())


# -- metrics -------------------------------------------------------------------


def _rec(onset, stop, ident=1, horizon=50):
    return TrialRecord(0, onset, 1, horizon, {(0, "bayes"): (stop, ident)})


def test_aggregate_examples():
    m = aggregate_metrics([_rec(10, 14), _rec(20, 22, ident=3), _rec(10, 5), _rec(None, None)], 0, "bayes")
    assert m.trials == 4 and m.pfa == 0.25
    assert m.mean_delay == 3.0 and m.misidentification == 0.5
    assert m.detection_rate == 1.0
    all_fa = aggregate_metrics([_rec(10, 3), _rec(30, 1)], 0, "bayes")
    assert all_fa.pfa == 1.0 and all_fa.mean_delay is None and all_fa.misidentification is None
    missed = aggregate_metrics([_rec(10, None), _rec(10, 14)], 0, "bayes")
    assert missed.detection_rate == 0.5 and missed.pfa == 0.0
    with pytest.raises(ValueError):
        aggregate_metrics([], 0, "bayes")


def test_stop_at_onset_is_not_a_false_alarm():
    assert not _rec(10, 10).false_alarm(0, "bayes")
    assert _rec(10, 9).false_alarm(0, "bayes")
    assert _rec(None, 40).false_alarm(0, "bayes")


def test_run_length_far():
    far, cens = run_length_far(np.array([10, 30, -1, -1]), 40)
    assert far == pytest.approx(1 / 30) and cens == 0.5


def test_pre_onset_maxima_brute_force(rng):
    stat = rng.standard_normal((30, 21))
    stat[:, 0] = -np.inf
    onsets = rng.integers(1, 25, size=30)
    got = pre_onset_maxima(stat, onsets)
    for k in range(30):
        seg = stat[k, 1 : min(onsets[k], 21)]
        assert got[k] == (seg.max() if seg.size else -np.inf)
        for b in (-0.5, 0.0, 1.0):
            stop = first_crossing(stat[k], b)
            assert (got[k] >= b) == (0 < stop < onsets[k])


def test_threshold_for_arl(rng):
    stat = np.cumsum(np.abs(rng.standard_normal((200, 101))), axis=1)
    stat[:, 0] = -np.inf
    b = threshold_for_arl(stat, 100, 20.0)
    arl = lambda thr: 1 / run_length_far(first_crossing(stat, thr), 100)[0]
    assert arl(b) >= 20.0 and arl(b - 1e-6) < 20.0
    assert threshold_for_arl(stat, 100, 40.0) >= b


# -- calibration -------------------------------------------------------------------


def test_calibration_step_rule():
    tr = calibrate_threshold(lambda j, lam: j % 2 == 0, 4, alpha=0.25, a0=2.0, init=1.0, offset=1.0)
    lam, expected = 1.0, [1.0]
    for j in range(1, 5):
        lam += 2.0 / (j + 1.0) * ((j % 2 == 0) - 0.25)
        expected.append(lam)
    np.testing.assert_allclose(tr, expected)


def test_calibration_extremes_are_monotone():
    up = calibrate_threshold(lambda j, lam: j % 3 == 0, 50, alpha=0.0)
    down = calibrate_threshold(lambda j, lam: j % 3 == 0, 50, alpha=1.0)
    assert np.all(np.diff(up) >= 0) and np.all(np.diff(down) <= 0)
    clipped = calibrate_threshold(lambda j, lam: True, 50, alpha=0.1, lower=0.0, upper=0.8)
    assert clipped.max() <= 0.8
    with pytest.raises(ValueError):
        calibrate_threshold(lambda j, lam: True, 5, alpha=1.5)


def test_calibration_converges_to_alpha():
    rng = np.random.default_rng(0)
    u = rng.random(4000)
    # false alarm iff U > lam, so the target threshold is 1 - alpha
    tr = calibrate_threshold(lambda j, lam: u[j - 1] > lam, 4000, alpha=0.2, init=0.5)
    assert tr[-1] == pytest.approx(0.8, abs=0.03)


# -- experiment ---------------------------------------------------------------------


def test_simulate_uses_named_streams(exp):
    a = exp.simulate("bayes_calib", 5, 20)
    b = exp.simulate("bayes_calib", 5, 20)
    c = exp.simulate("bayes_eval", 5, 20)
    assert np.array_equal(a.xhat, b.xhat) and not np.array_equal(a.xhat, c.xhat)
    assert a.xhat.shape == (5, 21, 5, 2) and np.all(a.y[:, 0] == 0)
    d = exp.simulate("attack", 3, 20, onset=7)
    assert np.all(d.onsets == 7) and d.onset_of(0) == 7


def test_run_trial(exp):
    thr = {(n, d): np.inf for n in range(5) for d in ("bayes", "chi2", "msprt", "wlglr")}
    rec = run_trial(exp, thr, trial=3)
    assert len(rec.outcomes) == 20
    assert all(v == (None, None) for v in rec.outcomes.values())
    thr = {(0, "bayes"): 0.5, (0, "wlglr"): 5.0}
    r1, r2 = run_trial(exp, thr, 4), run_trial(exp, thr, 4)
    assert r1 == r2
    r3 = run_trial(exp, {(0, "bayes"): 0.0}, 4)
    assert r3.outcomes[(0, "bayes")][0] == 1


def test_bayes_sweep_small(exp):
    rows, traces = bayes_sweep(exp, alphas=[0.2])
    assert {r.detector for r in rows} == {"bayes", "chi2"}
    assert all(r.node == 0 and r.target == 0.2 and 0 <= r.achieved <= 1 for r in rows)
    assert traces[(0, "bayes", 0.2)].shape == (41,)
    with pytest.raises(ValueError):
        bayes_sweep(exp, alphas=[])


def test_nonbayes_sweep_small(exp):
    rows = nonbayes_sweep(exp, arl_targets=[5])
    assert {r.detector for r in rows} == {"msprt", "wlglr", "chi2"}
    for r in rows:
        assert r.achieved == pytest.approx(1 / 5, rel=0.5)


def test_csv_bytes_are_deterministic(tmp_path):
    cfg = small_config()
    a = sweep_and_emit(cfg, tmp_path / "a")
    sweep_and_emit(cfg, tmp_path / "b")
    for stem in a:
        assert (tmp_path / "a" / f"{stem}.csv").read_bytes() == (tmp_path / "b" / f"{stem}.csv").read_bytes()
    text = rows_to_csv(a["delay_vs_pfa"])
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
