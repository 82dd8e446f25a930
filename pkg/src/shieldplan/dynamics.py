"""Agent and joint dynamics.

Joint state ordering is ``[p_x^r, v_r, p_y^R, p_y^H]`` with
``p_x^r = p_x^H - p_x^R`` and ``v_r = v^H - v^R`` (positive p_x^r means the
human is ahead). Controls are ``[v_lat, a]`` for both agents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import DynamicsConfig

NX = 4
NU = 2
PX, VR, PYR, PYH = range(4)
VLAT, ACC = range(2)


@dataclass(frozen=True)
class AgentState:
    """Kinematic bicycle state (rear-axle reference point)."""

    x: float
    y: float
    heading: float
    speed: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed])

    @classmethod
    def from_array(cls, a) -> "AgentState":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def vx(self) -> float:
        return self.speed * math.cos(self.heading)


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi); angles already in range are returned unchanged."""
    if -math.pi <= a < math.pi:
        return a
    return (a + math.pi) % (2.0 * math.pi) - math.pi


class ControlBox:
    """Axis-aligned box over ``[v_lat, a]`` with its 3x3-style lattice."""

    def __init__(self, vlat: tuple[float, float], accel: tuple[float, float]):
        self.lo = np.array([vlat[0], accel[0]], dtype=float)
        self.hi = np.array([vlat[1], accel[1]], dtype=float)

    def clip(self, u):
        return np.clip(u, self.lo, self.hi)

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    def levels(self, n: int) -> list[np.ndarray]:
        """Per-channel levels; zero replaces the midpoint when the box holds it."""
        out = []
        for lo, hi in zip(self.lo, self.hi):
            lv = np.linspace(lo, hi, n)
            if n % 2 == 1 and lo <= 0.0 <= hi:
                lv[n // 2] = 0.0
            out.append(lv)
        return out

    def lattice(self, n: int = 3) -> np.ndarray:
        """All lattice controls, shape (n*n, 2), v_lat-major ordering."""
        lv, la = self.levels(n)
        g = np.array(np.meshgrid(lv, la, indexing="ij")).reshape(2, -1).T
        return np.ascontiguousarray(g)


def robot_box(cfg: DynamicsConfig) -> ControlBox:
    return ControlBox(cfg.robot_vlat, cfg.robot_accel)


def human_box(cfg: DynamicsConfig) -> ControlBox:
    return ControlBox(cfg.human_vlat, cfg.human_accel)


# ---------------------------------------------------------------------------
# simulation-grade model

def _check_finite(*arrs):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to dynamics")


def step_bicycle(state: AgentState, steer: float, accel: float, dt: float,
                 wheelbase: float = 2.7, substeps: int = 50) -> AgentState:
    """Advance the kinematic bicycle by ``dt`` with forward-Euler substeps.

    Inputs are held constant over the step.
    """
    _check_finite(state.as_array(), [steer, accel])
    x, y, psi, v = state.x, state.y, state.heading, state.speed
    h = dt / substeps
    k = math.tan(steer) / wheelbase
    for _ in range(substeps):
        x, y, psi, v = (x + v * math.cos(psi) * h,
                        y + v * math.sin(psi) * h,
                        psi + v * k * h,
                        v + accel * h)
    return AgentState(x, y, wrap_angle(psi), v)


def bicycle_jacobians(state: AgentState, steer: float, accel: float, dt: float,
                      wheelbase: float = 2.7, substeps: int = 50):
    """Exact Jacobians of :func:`step_bicycle` w.r.t. state and ``(steer, accel)``.

    Propagated alongside the substep recursion (chain rule through each
    Euler substep).
    """
    x, y, psi, v = state.x, state.y, state.heading, state.speed
    h = dt / substeps
    k = math.tan(steer) / wheelbase
    dk = 1.0 / (math.cos(steer) ** 2 * wheelbase)
    J = np.eye(4)
    G = np.zeros((4, 2))
    for _ in range(substeps):
        c, s = math.cos(psi), math.sin(psi)
        F = np.array([
            [1.0, 0.0, -v * s * h, c * h],
            [0.0, 1.0, v * c * h, s * h],
            [0.0, 0.0, 1.0, k * h],
            [0.0, 0.0, 0.0, 1.0],
        ])
        Fu = np.array([
            [0.0, 0.0],
            [0.0, 0.0],
            [v * dk * h, 0.0],
            [0.0, h],
        ])
        J = F @ J
        G = F @ G + Fu
        x, y, psi, v = (x + v * c * h, y + v * s * h, psi + v * k * h, v + accel * h)
    return J, G


def lateral_steer(state: AgentState, vlat_cmd: float, cfg: DynamicsConfig) -> float:
    """Steering that drives heading toward the one realizing ``vlat_cmd``."""
    v = max(state.speed, 1e-3)
    target = math.asin(max(-1.0, min(1.0, vlat_cmd / v))) if state.speed > 0.1 else 0.0
    rate = (target - state.heading) / cfg.heading_tau
    steer = math.atan(rate * cfg.wheelbase / v)
    return max(-cfg.max_steer, min(cfg.max_steer, steer))


def step_agent(state: AgentState, u, cfg: DynamicsConfig, pieces: int = 4) -> AgentState:
    """Realize a planning command ``[v_lat, a]`` on the bicycle model.

    The step is split into ``pieces`` control intervals; steering is
    recomputed at the start of each one.
    """
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    h = cfg.dt / pieces
    sub = max(1, cfg.substeps // pieces)
    for _ in range(pieces):
        steer = lateral_steer(state, float(u[VLAT]), cfg)
        state = step_bicycle(state, steer, float(u[ACC]), h, cfg.wheelbase, sub)
    if state.speed < 0.0:
        state = replace(state, speed=0.0)
    return state


# ---------------------------------------------------------------------------
# planning-grade joint model

def joint_matrices(dt: float):
    A = np.array([[1.0, dt, 0.0, 0.0],
                  [0.0, 1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0]])
    BR = np.array([[0.0, 0.0],
                   [0.0, -dt],
                   [dt, 0.0],
                   [0.0, 0.0]])
    BH = np.array([[0.0, 0.0],
                   [0.0, dt],
                   [0.0, 0.0],
                   [dt, 0.0]])
    return A, BR, BH


def step_joint(x, uR, uH, dt: float) -> np.ndarray:
    """Linear joint update; broadcasts over leading dimensions."""
    x = np.asarray(x, dtype=float)
    uR = np.asarray(uR, dtype=float)
    uH = np.asarray(uH, dtype=float)
    _check_finite(x, uR, uH)
    shape = np.broadcast_shapes(x.shape, uR.shape[:-1] + (NX,), uH.shape[:-1] + (NX,))
    out = np.empty(shape)
    out[..., PX] = x[..., PX] + x[..., VR] * dt
    out[..., VR] = x[..., VR] + (uH[..., ACC] - uR[..., ACC]) * dt
    out[..., PYR] = x[..., PYR] + uR[..., VLAT] * dt
    out[..., PYH] = x[..., PYH] + uH[..., VLAT] * dt
    return out


@dataclass
class LinearizedDynamics:
    A: np.ndarray
    BR: np.ndarray
    BH: np.ndarray
    x: np.ndarray
    uR: np.ndarray
    uH: np.ndarray
    duH: np.ndarray

    def predict(self, dx, duR, duH=None) -> np.ndarray:
        """Next-state deviation from the nominal successor."""
        duH = self.duH if duH is None else duH
        return self.A @ dx + self.BR @ duR + self.BH @ duH


def linearize(x, uR, uH, dt: float, uH_mean=None) -> LinearizedDynamics:
    """Jacobians of the joint map at the nominal triple (exact for this model)."""
    x, uR, uH = (np.asarray(v, dtype=float) for v in (x, uR, uH))
    _check_finite(x, uR, uH)
    A, BR, BH = joint_matrices(dt)
    duH = np.zeros(NU) if uH_mean is None else np.asarray(uH_mean, float) - uH
    return LinearizedDynamics(A, BR, BH, x, uR, uH, duH)


def assemble_joint(robot: AgentState, human: AgentState) -> np.ndarray:
    """Change of coordinates from agent states to the joint state."""
    return np.array([
        human.x - robot.x,
        human.vx - robot.vx,
        robot.y,
        human.y,
    ])


def split_joint(x, robot: AgentState) -> tuple[AgentState, AgentState]:
    """Inverse of :func:`assemble_joint` given the robot's state.

    Headings are not represented in the joint state; the human is returned
    heading-aligned with the road.
    """
    x = np.asarray(x, dtype=float)
    r = AgentState(robot.x, float(x[PYR]), robot.heading, robot.speed)
    h = AgentState(robot.x + float(x[PX]), float(x[PYH]), 0.0, robot.vx + float(x[VR]))
    return r, h
