"""Closed-loop simulation: human drivers, the plan/shield/step loop and metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cache
from .config import Config, KraussConfig
from .cost import QuadraticCost
from .dynamics import AgentState, assemble_joint, human_box, robot_box, step_agent
from .grid import Grid4
from .human import IntentBasis, ParamGrid, action_likelihood, HumanParams
from .inference import BeliefFilter
from .qmdp import QmdpTable, solve_qmdp
from .reachability import FailureSpec, SafetyCertificate, certificate_from_config, failure_margin
from .smpc import Planner, PlannerOptions
from .tree import HumanModel

log = logging.getLogger(__name__)


class SafetyViolation(RuntimeError):
    """A trial entered the failure set."""


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# ---------------------------------------------------------------------------
# human drivers

@dataclass
class KraussParams:
    accel: float = 3.0
    decel: float = 3.0
    tau: float = 1.0
    eta: float = 0.1
    desired_speed: float = 30.0
    lane_change_prob: float = 0.02
    length: float = 5.0
    clear_distance: float = 15.0

    def __post_init__(self):
        if min(self.accel, self.decel, self.tau) <= 0.0:
            raise ValueError("Krauss a, b and tau must be positive")
        if self.eta < 0.0:
            raise ValueError("Krauss eta must be nonnegative")

    @classmethod
    def from_config(cls, kc: KraussConfig) -> "KraussParams":
        return cls(kc.accel, kc.decel, kc.tau, kc.eta, kc.desired_speed, kc.lane_change_prob,
                   kc.length, kc.clear_distance)


def safe_velocity(v_leader: float, v_human: float, gap: float, p: KraussParams) -> float:
    return v_leader + (gap - v_leader * p.tau) / ((v_human + v_leader) / (2.0 * p.decel) + p.tau)


def krauss_accel(human: AgentState, leader: AgentState | None, p: KraussParams,
                 rng: np.random.Generator | None, dt: float) -> float:
    """Longitudinal part of the car-following rule: the acceleration realizing v_next."""
    v = human.speed
    if leader is None:
        v_safe = math.inf
    else:
        gap = leader.x - human.x - p.length
        if gap <= 0.0:
            return -p.decel
        v_safe = safe_velocity(leader.speed, v, gap, p)
    v_des = min(v_safe, v + p.accel * dt, p.desired_speed)
    noise = rng.uniform(0.0, p.eta) if (rng is not None and p.eta > 0.0) else 0.0
    v_next = max(0.0, v_des - noise)
    return float(np.clip((v_next - v) / dt, -p.decel, p.accel))


def _lane_of(y: float, lanes) -> int:
    return int(np.argmin([abs(y - c) for c in lanes]))


def _lateral_command(y: float, target: float, limit: float) -> float:
    return float(np.clip(1.5 * (target - y), -limit, limit))


class KraussDriver:
    """Responsive car-following human with random lane changes."""

    def __init__(self, p: KraussParams, lanes, dt: float, vlat_limit: float = 1.0):
        self.p = p
        self.lanes = tuple(lanes)
        self.dt = dt
        self.vlat_limit = vlat_limit
        self.target = None

    def leader(self, human: AgentState, robot: AgentState) -> AgentState | None:
        same_lane = _lane_of(robot.y, self.lanes) == _lane_of(human.y, self.lanes)
        return robot if (robot.x > human.x and same_lane) else None

    def control(self, t: int, human: AgentState, robot: AgentState, rng) -> np.ndarray:
        if self.target is None:
            self.target = self.lanes[_lane_of(human.y, self.lanes)]
        a = krauss_accel(human, self.leader(human, robot), self.p, rng, self.dt)
        settled = abs(human.y - self.target) < 0.1
        if settled and rng.random() < self.p.lane_change_prob:
            other = self.lanes[1 - _lane_of(self.target, self.lanes)]
            clear = not (_lane_of(robot.y, self.lanes) == _lane_of(other, self.lanes)
                         and abs(robot.x - human.x) < self.p.clear_distance)
            if clear:
                self.target = other
        return np.array([_lateral_command(human.y, self.target, self.vlat_limit), a])


class BoltzmannDriver:
    """Noisily-rational human sampling the model's action lattice.

    The intent starts at the first lane center and switches to the second at
    a step drawn uniformly from ``window``.
    """

    def __init__(self, basis: IntentBasis, actions: np.ndarray, beta: float, window, rng):
        self.basis = basis
        self.actions = np.asarray(actions, dtype=float)
        self.beta = beta
        lo, hi = int(window[0]), int(window[1])
        self.switch = int(rng.integers(lo, hi + 1))

    def control(self, t: int, human: AgentState, robot: AgentState, rng) -> np.ndarray:
        theta = 1.0 if t < self.switch else 0.0
        dist = action_likelihood(self.basis, HumanParams(self.beta, theta), [human.y, human.speed],
                                 self.actions)
        return dist.actions[rng.choice(len(dist.probs), p=dist.probs)]


class IntersectionDriver:
    """Conflict-lane abstraction of a human approaching an intersection.

    Cruises until a decision step, then stops, goes straight or turns away
    from the conflict lane.
    """

    MODES = ("stop", "straight", "turn")

    def __init__(self, lanes, window, rng, box, dt: float, vlat_limit: float = 1.0):
        self.lanes = tuple(lanes)
        self.dt = dt
        self.decision = int(rng.integers(int(window[0]), int(window[1]) + 1))
        self.mode = self.MODES[int(rng.integers(3))]
        self.box = box
        self.vlat_limit = vlat_limit

    def control(self, t: int, human: AgentState, robot: AgentState, rng) -> np.ndarray:
        if t < self.decision or self.mode == "straight":
            return np.zeros(2)
        if self.mode == "stop":
            return np.array([0.0, max(self.box.lo[1], -human.speed / self.dt)])
        return np.array([_lateral_command(human.y, self.lanes[1], self.vlat_limit), 0.0])


@dataclass
class ReplayTrajectory:
    """Recorded human states on a fixed time step (CSV ``t,x,y,heading,speed``)."""

    t: np.ndarray
    states: np.ndarray  # (n, 4): x, y, heading, speed
    dt: float

    @classmethod
    def load(cls, path, dt: float) -> "ReplayTrajectory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls.from_rows(rows, dt)

    @classmethod
    def from_rows(cls, rows, dt: float) -> "ReplayTrajectory":
        keys = ("t", "x", "y", "heading", "speed")
        try:
            data = np.array([[float(r[k]) for k in keys] for r in rows], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"replay table needs numeric columns {keys}: {exc}") from None
        if len(data) < 2:
            raise ValueError("replay table needs at least two rows")
        if not np.all(np.isfinite(data)):
            raise ValueError("replay table has missing values")
        t = data[:, 0]
        steps = np.diff(t)
        if np.any(steps <= 0.0):
            raise ValueError("replay timestamps must be strictly increasing")
        if np.ptp(steps) > 1e-6 or abs(steps[0] - dt) > 1e-6:
            warnings.warn(f"replay time step differs from {dt}; resampling linearly", stacklevel=2)
            tn = np.arange(t[0], t[-1] + 1e-9, dt)
            if len(tn) < 2:
                raise ValueError("replay table spans less than one time step")
            cols = [np.interp(tn, t, data[:, k]) for k in range(1, 5)]
            return cls(tn, np.stack(cols, axis=1), dt)
        return cls(t, data[:, 1:].copy(), dt)

    def __len__(self) -> int:
        return len(self.t)

    def state(self, k: int) -> AgentState:
        k = min(k, len(self) - 1)
        return AgentState.from_array(self.states[k])


def replay_step(traj: ReplayTrajectory, k: int) -> np.ndarray:
    """Finite-difference ``[v_lat, a]`` between recorded samples k and k+1."""
    if not 0 <= k < len(traj) - 1:
        raise IndexError(f"step {k} outside the replay table (length {len(traj)})")
    s0, s1 = traj.states[k], traj.states[k + 1]
    return np.array([(s1[1] - s0[1]) / traj.dt, (s1[3] - s0[3]) / traj.dt])


class ReplayDriver:
    """Plays back recorded states; the human does not react to the robot."""

    def __init__(self, traj: ReplayTrajectory):
        self.traj = traj

    def control(self, t, human, robot, rng):
        return replay_step(self.traj, min(t, len(self.traj) - 2))


# ---------------------------------------------------------------------------
# caches

@dataclass
class Caches:
    cert: SafetyCertificate
    aware: QmdpTable
    agnostic: QmdpTable
    baseline_weight: float | None = None


def _table_setup(cfg: Config, cert: SafetyCertificate):
    qg = Grid4(cert.grid.lows, cert.grid.highs, cfg.qmdp.counts)
    basis = IntentBasis.from_config(cfg.human, cfg.dynamics.dt)
    params = ParamGrid.from_config(cfg.human)
    filt = BeliefFilter(basis, params, cert.uH, cfg.inference)
    return qg, basis, params, filt.T, QuadraticCost.from_config(cfg.cost)


def build_table(cfg: Config, cert: SafetyCertificate, shield_aware: bool) -> QmdpTable:
    qg, basis, params, T, cost = _table_setup(cfg, cert)
    table = solve_qmdp(qg, cert, basis, params, T, cost, cfg.qmdp.horizon, cert.uR, cert.uH,
                       cfg.dynamics.dt, shield_aware=shield_aware)
    table.config_hash = cfg.qmdp_hash()
    return table


def load_table(cfg: Config, cert: SafetyCertificate, path, shield_aware: bool) -> QmdpTable:
    qg, basis, params, T, cost = _table_setup(cfg, cert)
    n = len(params)
    table = QmdpTable(qg, np.zeros((n,) + qg.shape), np.zeros((n,) + qg.shape, dtype=np.int64),
                      cert.uR, cert.uH, basis, params, T, cost, cfg.qmdp.horizon, cfg.dynamics.dt,
                      shield_aware, cfg.qmdp_hash())
    table.load_arrays(path)
    return table


def cache_paths(cfg: Config, directory) -> dict:
    d = Path(directory)
    return {
        "cert": d / f"safeset-{cfg.certificate_hash()}",
        "aware": d / f"qmdp-aware-{cfg.qmdp_hash()}",
        "agnostic": d / f"qmdp-agnostic-{cfg.qmdp_hash()}",
    }


def load_caches(cfg: Config, directory=None, build: bool = True) -> Caches:
    """Load the certificate and both QMDP tables, computing missing ones.

    With ``build=False`` a missing or stale file raises
    :class:`cache.StaleCacheError`.
    """
    directory = cache.cache_dir(directory)
    paths = cache_paths(cfg, directory)

    def fetch(name, loader, maker):
        try:
            return loader(paths[name])
        except (FileNotFoundError, cache.StaleCacheError) as exc:
            if not build:
                raise cache.StaleCacheError(f"{exc}; recompute with compute-safeset/compute-qmdp") from exc
            log.info("building %s cache in %s", name, directory)
            obj = maker()
            obj.save(paths[name])
            return obj

    cert = fetch("cert", lambda p: SafetyCertificate.load(p, cfg.certificate_hash()),
                 lambda: certificate_from_config(cfg))
    aware = fetch("aware", lambda p: load_table(cfg, cert, p, True),
                  lambda: build_table(cfg, cert, True))
    agnostic = fetch("agnostic", lambda p: load_table(cfg, cert, p, False),
                     lambda: build_table(cfg, cert, False))
    return Caches(cert, aware, agnostic)


def make_planner(cfg: Config, caches: Caches, kind: str, baseline_weight: float | None = None) -> Planner:
    cert = caches.cert
    table = caches.aware
    human = HumanModel(table.basis, table.params, cert.uH, table.T, human_box(cfg.dynamics))
    sc = cfg.smpc
    if kind == "baseline":
        w = baseline_weight if baseline_weight is not None else caches.baseline_weight
        if w is None:
            w = sc.baseline_weight if not isinstance(sc.baseline_weight, str) else sc.baseline_weights[0]
    else:
        w = 0.0
    opts = PlannerOptions(sc.gamma, sc.slack_weight, True, float(w), sc.baseline_buffer_long,
                          sc.baseline_buffer_lat, FailureSpec.from_config(cfg.failure), sc.qp_tol,
                          sc.qp_max_iter)
    tc = cfg.tree
    return Planner(kind, cert, caches.aware, caches.agnostic, human, table.cost,
                   robot_box(cfg.dynamics), cfg.dynamics.dt, opts, tc.max_nodes, tc.depth,
                   tc.candidates, tc.similarity)


# ---------------------------------------------------------------------------
# trial log

COLUMNS = (
    "t", "px", "vr", "pyR", "pyH",
    "robot_x", "robot_y", "robot_heading", "robot_speed",
    "human_x", "human_y", "human_heading", "human_speed",
    "plan_vlat", "plan_a", "exec_vlat", "exec_a", "shielded", "outside_safe_set",
    "margin", "cost", "tree_size", "shield_nodes", "status", "kkt", "solve_ms", "degraded",
)


@dataclass
class TrialLog:
    """One row per step; the last row is the terminal state (no action, zero cost)."""

    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    nhyp: int = 9

    @property
    def columns(self) -> tuple:
        return COLUMNS + tuple(f"b{i}" for i in range(self.nhyp))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    @property
    def steps(self) -> int:
        return max(len(self.rows) - 1, 0)

    def write(self, directory, stem: str = "trial") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = d / f"{stem}.csv", d / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in self.columns})
        json_path.write_text(json.dumps(self.summary, indent=2, sort_keys=True))
        return csv_path, json_path

    @classmethod
    def read(cls, directory, stem: str = "trial") -> "TrialLog":
        d = Path(directory)
        summary = json.loads((d / f"{stem}.json").read_text())
        with open(d / f"{stem}.csv", newline="") as fh:
            raw = list(csv.DictReader(fh))
        rows = [{k: (v if k == "status" else float(v)) for k, v in r.items()} for r in raw]
        nh = sum(1 for k in (raw[0] if raw else {}) if k.startswith("b") and k[1:].isdigit())
        return cls(rows, summary, nh)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def closed_loop_cost(log: TrialLog) -> float:
    return float(sum(r["cost"] for r in log.rows))


def shielding_frequency(log: TrialLog) -> float:
    if log.steps == 0:
        raise ValueError("shielding frequency is undefined for a trial without steps")
    return 100.0 * float(sum(bool(r["shielded"]) for r in log.rows[:-1])) / log.steps


def cost_reduction(planner_costs, ablation_costs) -> np.ndarray:
    """Per-trial percentage reduction versus the ablation; J_ablation = 0 trials are dropped."""
    jp = np.asarray(planner_costs, dtype=float)
    ja = np.asarray(ablation_costs, dtype=float)
    if jp.shape != ja.shape:
        raise ValueError("cost reduction needs paired trials")
    keep = ja != 0.0
    if not np.all(keep):
        warnings.warn(f"{int((~keep).sum())} trial(s) with zero ablation cost excluded", stacklevel=2)
    return 100.0 * (ja[keep] - jp[keep]) / ja[keep]


def box_stats(values) -> dict:
    """Median, quartiles, 1.5 IQR whiskers and outliers."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "n": int(v.size), "median": float(med), "q1": float(q1), "q3": float(q3),
        "whisker_lo": float(inside.min()), "whisker_hi": float(inside.max()),
        "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
        "mean": float(v.mean()),
    }


# ---------------------------------------------------------------------------
# the closed loop

def make_driver(cfg: Config, rng: np.random.Generator):
    sc = cfg.sim
    dyn = cfg.dynamics
    lanes = cfg.human.lane_centers
    if sc.human_source == "krauss":
        return KraussDriver(KraussParams.from_config(sc.krauss), lanes, dyn.dt, dyn.human_vlat[1])
    if sc.human_source == "boltzmann":
        basis = IntentBasis.from_config(cfg.human, dyn.dt)
        return BoltzmannDriver(basis, human_box(dyn).lattice(cfg.reach.lattice_levels),
                               sc.human_beta, sc.switch_window, rng)
    if sc.human_source == "intersection":
        return IntersectionDriver(lanes, sc.decision_window, rng, human_box(dyn), dyn.dt, dyn.human_vlat[1])
    if sc.human_source == "replay":
        if not sc.replay_path:
            raise ValueError("human source 'replay' needs sim.replay_path")
        return ReplayDriver(ReplayTrajectory.load(sc.replay_path, dyn.dt))
    raise ValueError(f"unknown human source {sc.human_source!r}")


def _agent(a) -> AgentState:
    return AgentState(a.x, a.y, a.heading, a.speed)


def run_trial(cfg: Config, caches: Caches, planner: str | None = None, seed: int | None = None,
              steps: int | None = None, baseline_weight: float | None = None) -> TrialLog:
    """Plan, shield and step both agents for ``steps`` steps.

    Every planner variant is filtered by the same shield. Entering the
    failure set aborts the trial and sets ``summary["violation"]``.
    """
    sc = cfg.sim
    kind = planner or sc.planner
    seed = sc.seed if seed is None else seed
    steps = sc.steps if steps is None else steps
    if steps < 0:
        raise ValueError("number of steps must be nonnegative")
    dyn = cfg.dynamics
    dt = dyn.dt
    cert = caches.cert
    spec = cert.spec
    plan = make_planner(cfg, caches, kind, baseline_weight)
    table = caches.aware
    filt = BeliefFilter(table.basis, table.params, cert.uH, cfg.inference)
    hbox = human_box(dyn)
    rng_tree = stream(seed, "tree")
    rng_human = stream(seed, "human")
    driver = make_driver(cfg, stream(seed, "scenario"))
    replay = driver.traj if isinstance(driver, ReplayDriver) else None

    robot = _agent(sc.robot)
    human = replay.state(0) if replay is not None else _agent(sc.human)
    b = filt.prior.copy()
    prev = None
    out = TrialLog(nhyp=len(b))
    violation = False
    t0 = time.perf_counter()
    for t in range(steps + 1):
        x = assemble_joint(robot, human)
        margin = float(failure_margin(x, spec))
        if prev is not None:
            u_obs = np.array([(human.y - prev.y) / dt, (human.speed - prev.speed) / dt])
            b = filt.step(b, prev.y, prev.speed, u_obs)
        row = dict(t=t * dt, px=float(x[0]), vr=float(x[1]), pyR=float(x[2]), pyH=float(x[3]),
                   robot_x=robot.x, robot_y=robot.y, robot_heading=robot.heading,
                   robot_speed=robot.speed, human_x=human.x, human_y=human.y,
                   human_heading=human.heading, human_speed=human.speed,
                   plan_vlat=0.0, plan_a=0.0, exec_vlat=0.0, exec_a=0.0, shielded=False,
                   outside_safe_set=False, margin=margin, cost=0.0, tree_size=0, shield_nodes=0,
                   status="terminal", kkt=0.0, solve_ms=0.0, degraded=False)
        row.update({f"b{i}": float(p) for i, p in enumerate(b)})
        out.rows.append(row)
        if margin < 0.0:
            violation = True
            row["status"] = "violation"
            log.error("failure set entered at step %d (margin %.3f)", t, margin)
            break
        if t == steps:
            break
        xq = np.clip(x, cert.grid.lows, cert.grid.highs)
        res = plan.plan(xq, b, human.vx, rng_tree)
        u_exec, shielded, outside = cert.shield_verbose(xq, res.action)
        row.update(plan_vlat=float(res.action[0]), plan_a=float(res.action[1]),
                   exec_vlat=float(u_exec[0]), exec_a=float(u_exec[1]), shielded=bool(shielded),
                   outside_safe_set=bool(outside), cost=float(table.cost.stage(x, u_exec)),
                   tree_size=res.tree_size, shield_nodes=res.shield_nodes, status=res.status,
                   kkt=float(res.kkt), solve_ms=1e3 * res.solve_time, degraded=bool(res.degraded))
        uH = hbox.clip(driver.control(t, human, robot, rng_human))
        prev = human
        robot = step_agent(robot, u_exec, dyn)
        human = replay.state(t + 1) if replay is not None else step_agent(human, uH, dyn)

    out.summary = {
        "planner": kind,
        "scenario": sc.scenario,
        "human_source": sc.human_source,
        "seed": int(seed),
        "steps": out.steps,
        "closed_loop_cost": closed_loop_cost(out),
        "shielding_frequency": shielding_frequency(out) if out.steps else None,
        "shield_count": int(sum(bool(r["shielded"]) for r in out.rows[:-1])),
        "min_margin": float(min(r["margin"] for r in out.rows)),
        "violation": violation,
        "degraded_steps": int(sum(bool(r["degraded"]) for r in out.rows)),
        "median_solve_ms": float(np.median([r["solve_ms"] for r in out.rows[:-1]])) if out.steps else 0.0,
        "wall_s": time.perf_counter() - t0,
    }
    if kind == "baseline":
        out.summary["baseline_weight"] = plan.opts.proximity_weight
    return out


# ---------------------------------------------------------------------------
# benchmarks

def trial_seeds(seed: int, n: int, purpose: str = "trials") -> list[int]:
    return [int(s) for s in stream(seed, purpose).integers(0, 2**31 - 1, size=n)]


def tune_baseline_weight(cfg: Config, caches: Caches, seed: int | None = None) -> float:
    """Grid search over the baseline's proximity weight on separate tuning seeds.

    Picks the weight with the lowest median closed-loop cost (first on ties)
    and stores it on ``caches``.
    """
    sc = cfg.smpc
    if not isinstance(sc.baseline_weight, str):
        caches.baseline_weight = float(sc.baseline_weight)
        return caches.baseline_weight
    if sc.baseline_weight != "auto":
        raise ValueError(f"baseline_weight must be a number or 'auto', not {sc.baseline_weight!r}")
    seeds = trial_seeds(cfg.sim.seed if seed is None else seed, sc.baseline_tuning_trials, "tuning")
    best_w, best_j = None, np.inf
    for w in sc.baseline_weights:
        j = float(np.median([closed_loop_cost(run_trial(cfg, caches, "baseline", s, baseline_weight=w))
                             for s in seeds]))
        log.info("baseline weight %g: median cost %.3f", w, j)
        if j < best_j:
            best_w, best_j = float(w), j
    caches.baseline_weight = best_w
    return best_w


_WORKER: dict = {}


def _worker_init(cfg_dict, cache_directory, baseline_weight):
    from .config import config_from_dict
    cfg = config_from_dict(cfg_dict)
    caches = load_caches(cfg, cache_directory, build=False)
    caches.baseline_weight = baseline_weight
    _WORKER.update(cfg=cfg, caches=caches)


def _worker_run(job):
    kind, seed = job
    return run_trial(_WORKER["cfg"], _WORKER["caches"], kind, seed)


def run_trials(cfg: Config, caches: Caches, jobs_list, jobs: int = 1, cache_directory=None) -> list:
    """Run ``(planner, seed)`` pairs, optionally across a process pool; order is preserved."""
    if jobs <= 1 or len(jobs_list) <= 1:
        return [run_trial(cfg, caches, k, s) for k, s in jobs_list]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                             initargs=(cfg.to_dict(), cache_directory, caches.baseline_weight)) as ex:
        return list(ex.map(_worker_run, jobs_list, chunksize=1))


REFERENCE = "ablation"


def benchmark(cfg: Config, caches: Caches, planners, trials: int, seed: int, jobs: int = 1,
              cache_directory=None, keep_logs: bool = False) -> dict:
    """Paired trials for every planner; cost reduction is measured against the ablation."""
    names = list(dict.fromkeys(planners))
    run_names = names + ([REFERENCE] if REFERENCE not in names else [])
    if "baseline" in run_names and caches.baseline_weight is None:
        tune_baseline_weight(cfg, caches, seed)
    seeds = trial_seeds(seed, trials)
    jobs_list = [(k, s) for k in run_names for s in seeds]
    logs = run_trials(cfg, caches, jobs_list, jobs, cache_directory)
    by = {k: logs[i * trials:(i + 1) * trials] for i, k in enumerate(run_names)}
    ref_cost = [closed_loop_cost(lg) for lg in by[REFERENCE]]
    out = {
        "scenario": cfg.sim.scenario,
        "human_source": cfg.sim.human_source,
        "seed": int(seed),
        "trials": int(trials),
        "seeds": seeds,
        "reference": REFERENCE,
        "baseline_weight": caches.baseline_weight,
        "planners": {},
    }
    # the reference is reported too, so its trials count toward the safety tally
    for k in run_names:
        lgs = by[k]
        cost = [closed_loop_cost(lg) for lg in lgs]
        freq = [shielding_frequency(lg) if lg.steps else 0.0 for lg in lgs]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            red = cost_reduction(cost, ref_cost)
        out["planners"][k] = {
            "closed_loop_cost": cost,
            "shielding_frequency": freq,
            "cost_reduction": [float(r) for r in red],
            "violations": int(sum(lg.summary["violation"] for lg in lgs)),
            "min_margin": float(min(lg.summary["min_margin"] for lg in lgs)),
            "degraded_steps": int(sum(lg.summary["degraded_steps"] for lg in lgs)),
            "stats": {
                "closed_loop_cost": box_stats(cost),
                "shielding_frequency": box_stats(freq),
                "cost_reduction": box_stats(red),
            },
        }
    out["violations"] = int(sum(p["violations"] for p in out["planners"].values()))
    if keep_logs:
        out["_logs"] = by
    return out


def write_benchmark(result: dict, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    clean = {k: v for k, v in result.items() if not k.startswith("_")}
    (d / "summary.json").write_text(json.dumps(clean, indent=2, sort_keys=True))
    cols = ("planner", "metric", "n", "whisker_lo", "q1", "median", "q3", "whisker_hi", "mean", "outliers")
    with open(d / "quantiles.tsv", "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for name, p in clean["planners"].items():
            for metric, st in p["stats"].items():
                if st.get("n", 0) == 0:
                    fh.write(f"{name}\t{metric}\t0" + "\tnan" * 6 + "\t\n")
                    continue
                vals = [st[c] for c in cols[3:9]]
                fh.write("\t".join([name, metric, str(st["n"])] + [repr(v) for v in vals]
                                   + [",".join(repr(o) for o in st["outliers"])]) + "\n")


def format_report(summary: dict) -> str:
    lines = [f"scenario {summary['scenario']}  trials {summary['trials']}  seed {summary['seed']}",
             f"{'planner':<12} {'J_cl median':>12} {'shield % median':>16} {'reduction % median':>19} {'violations':>10}"]
    for name, p in summary["planners"].items():
        st = p["stats"]
        red = st["cost_reduction"].get("median", float("nan"))
        lines.append(f"{name:<12} {st['closed_loop_cost']['median']:>12.2f} "
                     f"{st['shielding_frequency']['median']:>16.2f} {red:>19.2f} {p['violations']:>10d}")
    return "\n".join(lines)
