"""Quadratic robot stage and terminal cost on the joint state."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CostConfig
from .dynamics import PX, PYR, VR


@dataclass(frozen=True)
class QuadraticCost:
    """``w_lat (p_y^R - lane)^2 + w_speed (v_r - vr_ref)^2 + w_u |u|^2``.

    The lateral reference switches to ``pass_lane`` once the robot is more
    than ``pass_distance`` ahead of the human (``p_x^r < -pass_distance``).
    """

    w_lat: float = 1.0
    w_speed: float = 0.5
    w_u: float = 0.1
    target_lane: float = 1.85
    vr_ref: float = -5.0
    terminal_scale: float = 1.0
    pass_distance: float | None = None
    pass_lane: float | None = None

    def __post_init__(self):
        if min(self.w_lat, self.w_speed, self.terminal_scale) < 0 or self.w_u < 0:
            raise ValueError("cost weights must be nonnegative")

    @classmethod
    def from_config(cls, cc: CostConfig) -> "QuadraticCost":
        return cls(cc.w_lat, cc.w_speed, cc.w_u, cc.target_lane, cc.vr_ref,
                   cc.terminal_scale, cc.pass_distance, cc.pass_lane)

    def lane_ref(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lane = np.full(x.shape[:-1], self.target_lane)
        if self.pass_distance is not None and self.pass_lane is not None:
            lane = np.where(x[..., PX] < -self.pass_distance, self.pass_lane, lane)
        return lane

    def reference(self, x) -> np.ndarray:
        """Reference state with the untracked components copied from ``x``."""
        ref = np.array(x, dtype=float, copy=True)
        ref[..., VR] = self.vr_ref
        ref[..., PYR] = self.lane_ref(x)
        return ref

    def state_weights(self) -> np.ndarray:
        return np.array([0.0, self.w_speed, self.w_lat, 0.0])

    def state_cost(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.w_lat * (x[..., PYR] - self.lane_ref(x)) ** 2
                + self.w_speed * (x[..., VR] - self.vr_ref) ** 2)

    def stage(self, x, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.state_cost(x) + self.w_u * np.sum(u * u, axis=-1)

    def terminal(self, x) -> np.ndarray:
        return self.terminal_scale * self.state_cost(x)

