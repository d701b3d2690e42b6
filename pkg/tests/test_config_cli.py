import json

import pytest
import yaml

from fdiqcd.cli import main
from fdiqcd.config import ExperimentConfig, dump_config, load_config


def test_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict({"seed": 7, "bayes": {"alphas": [0.1]}, "attack": {"rho": 0.1}})
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert load_config(None) == ExperimentConfig()


def test_digest_changes_with_content():
    assert ExperimentConfig(seed=1).digest() != ExperimentConfig(seed=2).digest()


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": 1},
        {"bayes": {"bogus": 1}},
        {"bayes": {"alphas": [0.0]}},
        {"bayes": {"trials": 0}},
        {"nonbayes": {"arl_targets": [1]}},
        {"attack": {"rho": 1.0}},
        {"attack": {"target": 5}},
        {"detectors": {"names": ["cusum"]}},
        {"detectors": {"nodes": [7]}},
        {"nonbayes": {"attack_onset": 200, "attack_horizon": 100}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(data)


def _cfg(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump({"detectors": {"nodes": [0]}}))
    return ["--config", str(path), "--horizon", "30", "--trials", "20"]


def test_cli_dump_config(tmp_path):
    assert main(["dump-config", "--outdir", str(tmp_path), "--seed", "9", "--nodes", "1,2"]) == 0
    cfg = load_config(tmp_path / "config.yaml")
    assert cfg.seed == 9 and cfg.detectors.nodes == [1, 2]


def test_cli_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("bayes: {bogus: 1}\n")
    assert main(["dump-config", "--config", str(bad), "--outdir", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["dump-config", "--detectors", "cusum", "--outdir", str(tmp_path)]) == 2


def test_cli_simulate(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--outdir", str(out), "--trial", "2"] + _cfg(tmp_path)) == 0
    for name in ("trajectory.csv", "estimates.csv", "traces.csv", "onset.csv", "run_metadata.json"):
        assert (out / name).exists()
    assert len((out / "trajectory.csv").read_text().splitlines()) == 32
    meta = json.loads((out / "run_metadata.json").read_text())
    assert meta["command"] == "simulate" and meta["seed"] == 12345
    header = (out / "traces.csv").read_text().splitlines()[0]
    assert header == "t,node,detector,window,statistic,identified"


def test_cli_calibrate(tmp_path):
    out = tmp_path / "cal"
    assert main(["calibrate", "--outdir", str(out), "--detectors", "bayes"] + _cfg(tmp_path)) == 0
    rows = (out / "calibration.csv").read_text().splitlines()
    assert len(rows) == 1 + 3  # one row per alpha
    assert (out / "calibration_trace.csv").exists()
