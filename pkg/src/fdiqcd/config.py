"""Experiment configuration: dataclasses, YAML I/O and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .sim_core import REFERENCE_EDGES

DETECTORS = ("bayes", "chi2", "msprt", "wlglr")


@dataclass
class ModelConfig:
    p: int = 2
    q: int = 2
    n_nodes: int = 5
    edges: list = field(default_factory=lambda: [list(e) for e in REFERENCE_EDGES])
    seed: int = 2024
    gamma: float = 0.05
    gain_mode: str = "fixed"
    min_eig: float = 1e-3
    max_spectral_radius: float = 0.98


@dataclass
class AttackConfig:
    target: int = 1
    sigma_scale: float = 3.0
    rho: float = 0.05


@dataclass
class DetectorConfig:
    names: list = field(default_factory=lambda: list(DETECTORS))
    nodes: list = field(default_factory=lambda: [0, 1])
    onset_window: int = 20
    locality_radius: int | None = 2
    chi2_window: int = 3
    theta_scales: list = field(default_factory=lambda: [0.75, 1.5, 3.0, 6.0, 12.0])
    window_scale: int = 5
    bayes_include_self: bool = True
    msprt_include_self: bool = False
    glr_include_self: bool = False


@dataclass
class BayesConfig:
    trials: int = 2500
    eval_trials: int = 2500
    horizon: int = 125
    alphas: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    a0: float = 1.0
    init_threshold: float = 0.5
    step_offset: float = 0.0
    a0_chi2: float = 30.0
    init_threshold_chi2: float = 15.0
    step_offset_chi2: float = 10.0


@dataclass
class NonBayesConfig:
    arl_targets: list = field(default_factory=lambda: [25, 50, 100, 200])
    null_trials: int = 1000
    null_horizon: int = 500
    attack_trials: int = 1000
    attack_onset: int = 20
    attack_horizon: int = 120


@dataclass
class ExperimentConfig:
    seed: int = 12345
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    detectors: DetectorConfig = field(default_factory=DetectorConfig)
    bayes: BayesConfig = field(default_factory=BayesConfig)
    nonbayes: NonBayesConfig = field(default_factory=NonBayesConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        b, nb, d = self.bayes, self.nonbayes, self.detectors
        if b.trials < 1 or b.eval_trials < 1 or nb.null_trials < 1 or nb.attack_trials < 1:
            raise ValueError("trial counts must be >= 1")
        if b.horizon < 1 or nb.null_horizon < 1 or nb.attack_horizon < 1:
            raise ValueError("horizons must be >= 1")
        if any(not 0.0 < a < 1.0 for a in b.alphas):
            raise ValueError("every alpha must lie in (0, 1)")
        if any(g <= 1 for g in nb.arl_targets):
            raise ValueError("ARL targets must exceed 1")
        if not 0.0 < self.attack.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        unknown = set(d.names) - set(DETECTORS)
        if unknown:
            raise ValueError(f"unknown detectors {sorted(unknown)}")
        if not 0 <= self.attack.target < self.model.n_nodes:
            raise ValueError("attack target out of range")
        if any(not 0 <= n < self.model.n_nodes for n in d.nodes):
            raise ValueError("detector node out of range")
        if not 1 <= nb.attack_onset <= nb.attack_horizon:
            raise ValueError("attack onset must fall inside the attack horizon")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        sections = {
            "model": ModelConfig,
            "attack": AttackConfig,
            "detectors": DetectorConfig,
            "bayes": BayesConfig,
            "nonbayes": NonBayesConfig,
        }
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value or {})
            elif key == "seed":
                kwargs[key] = int(value)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(kind, values: dict):
    names = {f.name for f in dataclasses.fields(kind)}
    extra = set(values) - names
    if extra:
        raise ValueError(f"unknown keys {sorted(extra)} in {kind.__name__}")
    return kind(**values)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh))


def dump_config(cfg: ExperimentConfig, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
