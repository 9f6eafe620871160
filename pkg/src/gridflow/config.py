"""Run configuration: corpus, network, loss, optimizer and evaluation settings."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import GridGeometry
from .io import config_hash
from .losses import LossWeights
from .model import NetConfig
from .scene import ScenarioConfig, SensorNoise, random_scenario
from .training import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_scenarios: int = 250
    val_fraction: float = 0.2
    n_frames: int = 9
    width_cells: int = 24
    height_cells: int = 24
    cell_size_m: float = 0.5
    dt_s: float = 0.5
    n_vehicles: tuple = (1, 4)
    speed_range: tuple = (1.0, 3.0)
    yaw_rate_range: tuple = (0.2, 0.5)
    p_parked: float = 0.3
    p_turn: float = 0.3
    flip_prob: float = 0.01
    velocity_sigma: float = 0.2
    occlusion: bool = True

    def __post_init__(self):
        if self.n_scenarios < 1:
            raise ConfigError("n_scenarios must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        object.__setattr__(self, "n_vehicles", tuple(self.n_vehicles))
        object.__setattr__(self, "speed_range", tuple(self.speed_range))
        object.__setattr__(self, "yaw_rate_range", tuple(self.yaw_rate_range))

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.width_cells, self.height_cells, self.cell_size_m)

    def scenario(self, seed: int) -> ScenarioConfig:
        return random_scenario(seed, self.geometry, self.n_frames, self.n_vehicles, self.speed_range,
                               self.yaw_rate_range, self.p_parked, self.p_turn,
                               sensor_noise=SensorNoise(self.flip_prob, self.velocity_sigma), dt_s=self.dt_s,
                               occlusion=self.occlusion)


def scenario_seeds(run_seed: int, n: int) -> list[int]:
    return [int(np.random.SeedSequence([run_seed, i]).generate_state(1)[0]) for i in range(n)]


def split_seeds(seeds: list[int], val_fraction: float, run_seed: int) -> tuple[list[int], list[int]]:
    """Deterministic train/val split of scenario seeds."""
    order = np.random.default_rng([run_seed, 7]).permutation(len(seeds))
    n_val = int(round(val_fraction * len(seeds)))
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return [seeds[i] for i in train], [seeds[i] for i in val]


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 100
    retention_every_step: bool = True
    checkpoint_every: int = 5


def _build(cls, data: Optional[dict], name: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run. ``out_dir`` is excluded from the hash."""

    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scenario: Optional[ScenarioConfig] = None
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "corpus": asdict(self.corpus),
            "net": self.net.to_dict(),
            "loss": self.loss.to_dict(),
            "optim": self.optim.to_dict(),
            "eval": asdict(self.eval),
            "out_dir": self.out_dir,
        }
        if self.scenario is not None:
            d["scenario"] = self.scenario.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {"seed", "corpus", "net", "loss", "optim", "eval", "scenario", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        scenario = None
        if d.get("scenario") is not None:
            try:
                scenario = ScenarioConfig.from_dict(d["scenario"])
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"invalid scenario section: {exc}") from exc
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return cls(seed=seed, corpus=_build(CorpusConfig, d.get("corpus"), "corpus"),
                   net=_build(NetConfig, d.get("net"), "net"), loss=_build(LossWeights, d.get("loss"), "loss"),
                   optim=_build(OptimConfig, d.get("optim"), "optim"), eval=_build(EvalConfig, d.get("eval"), "eval"),
                   scenario=scenario, out_dir=str(d.get("out_dir", "runs/default")))

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        return self if seed is None else replace(self, seed=int(seed))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return config_hash(d)

    def validate(self) -> None:
        if self.corpus.n_frames < self.net.n_input + self.net.horizon:
            raise ConfigError(f"corpus n_frames={self.corpus.n_frames} is too short: need at least "
                              f"{self.net.n_input + self.net.horizon} ({self.net.n_input} input + "
                              f"{self.net.horizon} future frames)")
        if self.scenario is not None:
            try:
                self.scenario.validate(self.net.n_input, self.net.horizon)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(data)
