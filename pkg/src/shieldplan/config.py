"""Configuration dataclasses and JSON layering (built-in < file < flags)."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class DynamicsConfig:
    dt: float = 0.2
    # control boxes as (lo, hi); controls are ordered [v_lat, a]
    robot_vlat: tuple[float, float] = (-2.0, 2.0)
    robot_accel: tuple[float, float] = (-5.0, 3.0)
    human_vlat: tuple[float, float] = (-1.0, 1.0)
    human_accel: tuple[float, float] = (-3.0, 3.0)
    wheelbase: float = 2.7
    max_steer: float = 0.6
    substeps: int = 50
    # heading-tracking time constant used to realize lateral-velocity commands
    heading_tau: float = 0.05


@dataclass
class FailureConfig:
    sep_long: float = 5.5
    sep_lat: float = 2.0
    road_half_width: float = 3.7
    # extra clearance used only during safe-set synthesis (model mismatch)
    synthesis_buffer: float = 0.5
    geometry: str = "highway"


@dataclass
class GridConfig:
    lows: tuple[float, float, float, float] = (-40.0, -15.0, -4.0, -4.0)
    highs: tuple[float, float, float, float] = (40.0, 15.0, 4.0, 4.0)
    counts: tuple[int, int, int, int] = (41, 31, 21, 21)


@dataclass
class ReachConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    tol: float = 1e-6
    max_iter: int = 400
    lattice_levels: int = 3
    # level defining the safe set {V >= margin}; "lipschitz" uses the
    # finite-difference Lipschitz constant times the cell diagonal
    margin: float | str = 0.0


@dataclass
class HumanConfig:
    lane_centers: tuple[float, float] = (1.85, -1.85)
    cruise_speed: float = 30.0
    w_lane: float = 1.0
    w_speed: float = 0.1
    w_effort: float = 0.1
    betas: tuple[float, ...] = (0.1, 1.0, 10.0)
    thetas: tuple[float, ...] = (0.0, 0.5, 1.0)


@dataclass
class InferenceConfig:
    epsilon: float = 0.05
    likelihood: str = "discrete"  # or "gaussian"
    prior: tuple[float, ...] | None = None


@dataclass
class CostConfig:
    w_lat: float = 1.0
    w_speed: float = 0.5
    w_u: float = 0.1
    target_lane: float = 1.85
    # relative-velocity reference v_H - v_R: human cruise 30 m/s, robot wants 35 m/s
    vr_ref: float = -5.0
    terminal_scale: float = 1.0
    # once p_x^r < -pass_distance the lateral reference switches to pass_lane
    pass_distance: float | None = None
    pass_lane: float | None = None


@dataclass
class QmdpConfig:
    counts: tuple[int, int, int, int] = (21, 15, 11, 11)
    horizon: int = 20


@dataclass
class TreeConfig:
    max_nodes: int = 70
    depth: int = 10
    candidates: int = 5
    similarity: float = 1e-6


@dataclass
class SmpcConfig:
    gamma: float = 0.7
    slack_weight: float = 1e4
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000
    baseline_weight: float | str = "auto"
    baseline_weights: tuple[float, ...] = (10.0, 100.0, 1000.0, 10000.0)
    baseline_buffer_long: float = 8.0
    baseline_buffer_lat: float = 0.5
    baseline_tuning_trials: int = 5


@dataclass
class KraussConfig:
    accel: float = 3.0
    decel: float = 3.0
    tau: float = 1.0
    eta: float = 0.1
    desired_speed: float = 30.0
    lane_change_prob: float = 0.02
    length: float = 5.0
    clear_distance: float = 15.0


@dataclass
class AgentInit:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0


@dataclass
class ScenarioConfig:
    scenario: str = "highway-overtake"
    robot: AgentInit = field(default_factory=lambda: AgentInit(0.0, 1.85, 0.0, 35.0))
    human: AgentInit = field(default_factory=lambda: AgentInit(35.0, 1.85, 0.0, 30.0))
    steps: int = 75
    planner: str = "sharp-smpc"
    human_source: str = "boltzmann"  # boltzmann | krauss | replay | intersection
    replay_path: str | None = None
    seed: int = 0
    krauss: KraussConfig = field(default_factory=KraussConfig)
    # synthetic Boltzmann human: true rationality and the step window in
    # which its intent switches from the first to the second lane center
    human_beta: float = 10.0
    switch_window: tuple[int, int] = (5, 40)
    # intersection human: window for the stop / straight / turn decision
    decision_window: tuple[int, int] = (5, 25)
    trials: int = 50


@dataclass
class Config:
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    failure: FailureConfig = field(default_factory=FailureConfig)
    reach: ReachConfig = field(default_factory=ReachConfig)
    human: HumanConfig = field(default_factory=HumanConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    qmdp: QmdpConfig = field(default_factory=QmdpConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    smpc: SmpcConfig = field(default_factory=SmpcConfig)
    sim: ScenarioConfig = field(default_factory=ScenarioConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names: str) -> str:
        """Stable hash over the named sections; used to key cache files."""
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def certificate_hash(self) -> str:
        # the geometry tag only labels the scenario; it does not change the backup
        d = self.to_dict()
        failure = {k: v for k, v in d["failure"].items() if k != "geometry"}
        blob = json.dumps({"dynamics": d["dynamics"], "failure": failure, "reach": d["reach"]},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def qmdp_hash(self) -> str:
        return self.certificate_hash() + self.section_hash("human", "inference", "cost", "qmdp")


# Scenario presets layered between built-in defaults and user files.
SCENARIOS: dict[str, dict] = {
    "highway-overtake": {
        "sim": {"scenario": "highway-overtake", "human_source": "boltzmann"},
    },
    "responsive-human": {
        "sim": {"scenario": "responsive-human", "human_source": "krauss"},
    },
    "intersection": {
        # conflict-point abstraction: p_x^r is the difference of arc-length
        # positions along the two approach paths; lane 1.85 is the conflict lane
        "failure": {"geometry": "intersection"},
        "human": {"cruise_speed": 12.0},
        "cost": {"vr_ref": -3.0},
        "sim": {
            "scenario": "intersection",
            "human_source": "intersection",
            "robot": {"x": 0.0, "y": 1.85, "heading": 0.0, "speed": 14.0},
            "human": {"x": 30.0, "y": 1.85, "heading": 0.0, "speed": 12.0},
        },
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: dict):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in data.items():
        if k not in fields:
            raise KeyError(f"unknown config key {cls.__name__}.{k}")
        sub = _DATACLASS_FIELDS.get((cls.__name__, k))
        if sub is not None and isinstance(v, dict):
            kwargs[k] = _build(sub, v)
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


_DATACLASS_FIELDS = {
    ("Config", "dynamics"): DynamicsConfig,
    ("Config", "failure"): FailureConfig,
    ("Config", "reach"): ReachConfig,
    ("Config", "human"): HumanConfig,
    ("Config", "inference"): InferenceConfig,
    ("Config", "cost"): CostConfig,
    ("Config", "qmdp"): QmdpConfig,
    ("Config", "tree"): TreeConfig,
    ("Config", "smpc"): SmpcConfig,
    ("Config", "sim"): ScenarioConfig,
    ("ReachConfig", "grid"): GridConfig,
    ("ScenarioConfig", "robot"): AgentInit,
    ("ScenarioConfig", "human"): AgentInit,
    ("ScenarioConfig", "krauss"): KraussConfig,
}


def config_from_dict(data: dict) -> Config:
    return _build(Config, _merge(Config().to_dict(), data))


def load_config(path: str | Path | None = None, scenario: str | None = None,
                overrides: dict | None = None) -> Config:
    """Layer defaults, an optional scenario preset, a JSON file and overrides."""
    data: dict[str, Any] = Config().to_dict()
    file_data: dict = {}
    if path is not None:
        with open(path) as fh:
            file_data = json.load(fh)
    tag = scenario or file_data.get("sim", {}).get("scenario")
    if tag is not None:
        if tag not in SCENARIOS:
            raise KeyError(f"unknown scenario {tag!r}")
        data = _merge(data, SCENARIOS[tag])
    data = _merge(data, file_data)
    if overrides:
        data = _merge(data, overrides)
    return _build(Config, data)


def save_config(cfg: Config, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
