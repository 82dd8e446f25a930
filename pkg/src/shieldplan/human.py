"""Noisily-rational human model over intent and rationality hypotheses.

Each intent basis is a penalty quadratic on the human's next lateral
position and speed plus control effort:

    Q_i(x, u) = w_lane (y + v_lat dt - y_i)^2 + w_speed (v + a dt - v_c)^2
                + w_u (v_lat^2 + a^2)

The human picks ``u`` with probability proportional to ``exp(-beta Q_theta)``
where ``Q_theta = theta Q_1 + (1 - theta) Q_2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import HumanConfig
from .dynamics import AgentState, ControlBox


@dataclass(frozen=True)
class IntentBasis:
    lane_centers: tuple[float, float] = (1.85, -1.85)
    cruise_speed: float = 30.0
    w_lane: float = 1.0
    w_speed: float = 0.1
    w_effort: float = 0.1
    dt: float = 0.2

    @classmethod
    def from_config(cls, hc: HumanConfig, dt: float) -> "IntentBasis":
        return cls(tuple(hc.lane_centers), hc.cruise_speed, hc.w_lane, hc.w_speed, hc.w_effort, dt)

    def basis(self, i: int, y, v, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        y = np.asarray(y, dtype=float)[..., None] if np.ndim(u) > 1 else y
        v = np.asarray(v, dtype=float)[..., None] if np.ndim(u) > 1 else v
        vl, a = u[..., 0], u[..., 1]
        return (self.w_lane * (y + vl * self.dt - self.lane_centers[i]) ** 2
                + self.w_speed * (v + a * self.dt - self.cruise_speed) ** 2
                + self.w_effort * (vl ** 2 + a ** 2))

    def hessian(self) -> np.ndarray:
        """u-Hessian of every Q_theta (independent of theta and state)."""
        dt2 = self.dt ** 2
        return 2.0 * np.diag([self.w_lane * dt2 + self.w_effort, self.w_speed * dt2 + self.w_effort])

    def minimizer(self, theta, y, v) -> np.ndarray:
        """Unconstrained argmin over u of ``Q_theta``; broadcasts."""
        theta = np.asarray(theta, dtype=float)
        target = theta * self.lane_centers[0] + (1.0 - theta) * self.lane_centers[1]
        dt = self.dt
        vl = self.w_lane * dt * (target - y) / (self.w_lane * dt ** 2 + self.w_effort)
        a = self.w_speed * dt * (self.cruise_speed - v) / (self.w_speed * dt ** 2 + self.w_effort)
        return np.stack(np.broadcast_arrays(vl, a), axis=-1)


@dataclass(frozen=True)
class HumanParams:
    beta: float
    theta: float

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")


class ParamGrid:
    """Finite hypothesis support, beta-major ordering."""

    def __init__(self, betas=(0.1, 1.0, 10.0), thetas=(0.0, 0.5, 1.0)):
        if len(betas) == 0 or len(thetas) == 0:
            raise ValueError("parameter grid must be nonempty")
        b, t = np.meshgrid(np.asarray(betas, float), np.asarray(thetas, float), indexing="ij")
        self.beta = b.ravel()
        self.theta = t.ravel()
        for bb, tt in zip(self.beta, self.theta):
            HumanParams(bb, tt)

    @classmethod
    def from_config(cls, hc: HumanConfig) -> "ParamGrid":
        return cls(hc.betas, hc.thetas)

    @classmethod
    def from_pairs(cls, pairs) -> "ParamGrid":
        g = cls.__new__(cls)
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        for bb, tt in arr:
            HumanParams(bb, tt)
        g.beta, g.theta = arr[:, 0].copy(), arr[:, 1].copy()
        return g

    def __len__(self) -> int:
        return len(self.beta)

    def __getitem__(self, i) -> HumanParams:
        return HumanParams(float(self.beta[i]), float(self.theta[i]))


@dataclass
class DiscreteDistribution:
    actions: np.ndarray
    probs: np.ndarray

    def mode(self) -> np.ndarray:
        return self.actions[int(np.argmax(self.probs))]


@dataclass
class GaussianDistribution:
    mean: np.ndarray
    cov: np.ndarray


def _yv(xH) -> tuple:
    if isinstance(xH, AgentState):
        return xH.y, xH.speed
    xH = np.asarray(xH, dtype=float)
    return xH[..., 0], xH[..., 1]


def q_value(basis: IntentBasis, theta: float, xH, uH) -> np.ndarray:
    """``Q_theta(x^H, u^H)``; ``xH`` is an AgentState or ``[y, speed]``."""
    y, v = _yv(xH)
    return theta * basis.basis(0, y, v, uH) + (1.0 - theta) * basis.basis(1, y, v, uH)


def softmax_neg(q, beta) -> np.ndarray:
    """Softmax of ``-beta q`` along the last axis with max-subtraction."""
    z = -np.asarray(beta, dtype=float)[..., None] * np.asarray(q, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def action_likelihood(basis: IntentBasis, params: HumanParams, xH, actions) -> DiscreteDistribution:
    actions = np.asarray(actions, dtype=float)
    if len(actions) == 0:
        raise ValueError("action set must be nonempty")
    q = q_value(basis, params.theta, xH, actions)
    return DiscreteDistribution(actions, softmax_neg(q, params.beta))


def likelihood_table(basis: IntentBasis, grid: ParamGrid, y, v, actions) -> np.ndarray:
    """P(u | x^H, hypothesis) for every hypothesis and action.

    ``y`` and ``v`` broadcast together; result shape ``(..., nhyp, nact)``.
    """
    y = np.asarray(y, dtype=float)[..., None]
    v = np.asarray(v, dtype=float)[..., None]
    q1 = basis.basis(0, y, v, actions)
    q2 = basis.basis(1, y, v, actions)
    q = grid.theta[:, None] * q1 + (1.0 - grid.theta[:, None]) * q2
    return softmax_neg(q, np.broadcast_to(grid.beta, q.shape[:-1]))


def gaussian_approx(basis: IntentBasis, params: HumanParams, xH, box: ControlBox | None = None) -> GaussianDistribution:
    """Mean at the (clamped) Q-minimizer, covariance ``(beta Lambda)^-1``."""
    if params.beta <= 0.0:
        raise ValueError("Gaussian approximation needs beta > 0")
    y, v = _yv(xH)
    mean = basis.minimizer(params.theta, y, v)
    if box is not None:
        mean = box.clip(mean)
    cov = np.linalg.inv(params.beta * basis.hessian())
    return GaussianDistribution(np.asarray(mean, dtype=float), cov)


def sample_action(dist, rng: np.random.Generator) -> np.ndarray:
    if isinstance(dist, DiscreteDistribution):
        return dist.actions[rng.choice(len(dist.probs), p=dist.probs)]
    return rng.multivariate_normal(dist.mean, dist.cov)
