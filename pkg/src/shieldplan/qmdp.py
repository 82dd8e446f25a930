"""Tabular QMDP dynamic programming over the joint state and hypotheses.

Backup at stage k, for hypothesis h and grid state x:

    V_k(x, h) = min_r  l(x, u_r) + sum_{h'} T[h, h'] sum_u P(u | x, h) V_{k+1}(f(x, u_r, u), h')

where a robot action in the shielding set is replaced by the safe action
before it is evaluated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import cache, kernels
from .cost import QuadraticCost
from .dynamics import step_joint
from .grid import Grid4, axis_interp
from .human import IntentBasis, ParamGrid, likelihood_table
from .reachability import SafetyCertificate

log = logging.getLogger(__name__)


@dataclass
class QmdpTable:
    grid: Grid4
    values: np.ndarray  # (nhyp, *grid.shape), stage-0 table
    greedy: np.ndarray  # (nhyp, *grid.shape) robot lattice indices
    uR: np.ndarray
    uH: np.ndarray
    basis: IntentBasis
    params: ParamGrid
    T: np.ndarray
    cost: QuadraticCost
    horizon: int
    dt: float
    shield_aware: bool = True
    config_hash: str = ""

    @property
    def nhyp(self) -> int:
        return len(self.params)

    def header(self) -> dict:
        return {
            "kind": "qmdp-table",
            "lows": self.grid.lows.tolist(),
            "highs": self.grid.highs.tolist(),
            "counts": list(self.grid.counts),
            "horizon": self.horizon,
            "shield_aware": self.shield_aware,
            "config_hash": self.config_hash,
        }

    def save(self, path) -> None:
        cache.write_array(path, np.concatenate([self.values.ravel(), self.greedy.ravel()]),
                          self.header())

    def load_arrays(self, path) -> None:
        """Fill ``values`` and ``greedy`` from a cache written for the same setup."""
        flat, _ = cache.read_array(path, {"kind": "qmdp-table", "config_hash": self.config_hash,
                                          "shield_aware": self.shield_aware,
                                          "horizon": self.horizon})
        n = self.nhyp * self.grid.size
        if flat.size != 2 * n:
            raise cache.StaleCacheError(f"{path}: table size mismatch; recompute the cache")
        shape = (self.nhyp,) + self.grid.shape
        self.values = flat[:n].reshape(shape)
        self.greedy = flat[n:].reshape(shape).astype(np.int64)


def _shield_map(cert: SafetyCertificate | None, pts: np.ndarray, nR: int) -> np.ndarray:
    """Index of the action actually evaluated for each (nominal action, point)."""
    eff = np.broadcast_to(np.arange(nR)[:, None], (nR, len(pts))).copy()
    if cert is None:
        return eff
    av = cert.action_values(pts)  # (P, nR)
    safe = np.argmax(av, axis=-1)
    outside = cert.value(pts) < cert.margin
    shielded = (av < cert.margin).T | outside[None, :]
    eff[shielded] = np.broadcast_to(safe[None, :], eff.shape)[shielded]
    return eff


def solve_qmdp(grid: Grid4, cert: SafetyCertificate | None, basis: IntentBasis,
               params: ParamGrid, T: np.ndarray, cost: QuadraticCost, horizon: int,
               uR: np.ndarray, uH: np.ndarray, dt: float, shield_aware: bool = True,
               human_speed: float | None = None) -> QmdpTable:
    """``horizon`` QMDP backups from the terminal cost; returns the stage-0 table.

    The human speed is not part of the joint state; the likelihoods assume
    ``human_speed`` (default: the basis cruise speed).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    uR = np.asarray(uR, dtype=float)
    uH = np.asarray(uH, dtype=float)
    if shield_aware:
        if cert is None:
            raise ValueError("a shield-aware table needs a safety certificate")
        if not cert.grid.same_domain(grid):
            raise ValueError("QMDP grid and certificate grid cover different domains")
        if cert.uR.shape != uR.shape or not np.allclose(cert.uR, uR):
            raise ValueError("QMDP robot actions must match the certificate's lattice")
    nR, nU, nh = len(uR), len(uH), len(params)
    T = np.asarray(T, dtype=float)
    pts = grid.points()
    shape = grid.shape
    vH = basis.cruise_speed if human_speed is None else human_speed

    eff = _shield_map(cert if shield_aware else None, pts, nR).reshape((nR,) + shape)
    stage = np.stack([cost.stage(pts, u).reshape(shape) for u in uR])
    # P(u | p_y^H, h): (nU, nh, NY, NH) with the p_y^R axis broadcast
    lik = likelihood_table(basis, params, grid.axes[3], vH, uH)  # (NH, nh, nU)
    weights = np.ascontiguousarray(np.broadcast_to(
        lik.transpose(2, 1, 0)[:, :, None, :], (nU, nh, shape[2], shape[3])))
    pyr, pyh = grid.axes[2], grid.axes[3]

    V = np.broadcast_to(cost.terminal(pts).reshape(shape), (nh,) + shape).copy()
    greedy = np.zeros((nh,) + shape, dtype=np.int64)
    Q = np.empty((nR, nh) + shape)
    for _ in range(horizon):
        W = np.tensordot(T, V, axes=(1, 0))
        shifted_h = {float(v): axis_interp(W, 4, pyh, pyh + v * dt) for v in np.unique(uH[:, 0])}
        for r, ur in enumerate(uR):
            lat = np.stack([axis_interp(shifted_h[float(uh[0])], 3, pyr, pyr + ur[0] * dt) for uh in uH])
            dv = (uH[:, 1] - ur[1]) * dt
            kernels.expect_shift(lat, weights, dv, grid.axes[0], grid.axes[1], float(dt), Q[r])
            Q[r] += stage[r]
        Qe = np.take_along_axis(Q, np.broadcast_to(eff[:, None], Q.shape), axis=0)
        greedy = np.argmin(Qe, axis=0)
        V = np.take_along_axis(Qe, greedy[None], axis=0)[0]
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("non-finite QMDP values")
    return QmdpTable(grid, V, greedy, uR, uH, basis, params, T, cost, horizon, dt, shield_aware)


def objective(table: QmdpTable, cert: SafetyCertificate | None, x, b, human_speed=None):
    """Pre-minimization objective of the terminal value, shape ``(..., nR)``.

    Returns ``(raw, effective)``: the per-action expectation and the same
    after shield substitution (``effective`` equals ``raw`` for a
    shield-agnostic table).
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    lead = x.shape[:-1]
    xf = x.reshape(-1, 4)
    bf = np.broadcast_to(b, lead + (table.nhyp,)).reshape(-1, table.nhyp)
    if not np.all(table.grid.contains(xf)):
        log.warning("terminal value query outside the QMDP grid; clamped")
    vH = table.basis.cruise_speed if human_speed is None else human_speed
    vH = np.broadcast_to(np.asarray(vH, dtype=float), lead).reshape(-1)
    succ = step_joint(xf[:, None, None, :], table.uR[None, :, None, :], table.uH[None, None, :, :], table.dt)
    Vn = table.grid.interp(table.values, succ)  # (nh', P, nR, nU)
    EV = np.tensordot(table.T, Vn, axes=(1, 0))  # (nh, P, nR, nU)
    P = likelihood_table(table.basis, table.params, xf[:, 3], vH, table.uH)  # (P, nh, nU)
    inner = np.einsum("ph,phu,hpru->pr", bf, P, EV)
    raw = table.cost.stage(xf[:, None, :], table.uR[None]) + inner
    eff_raw = raw
    if table.shield_aware and cert is not None:
        eff = _shield_map(cert, xf, len(table.uR)).T  # (P, nR)
        eff_raw = np.take_along_axis(raw, eff, axis=1)
    return raw.reshape(lead + (-1,)), eff_raw.reshape(lead + (-1,))


def terminal_value(table: QmdpTable, cert, x, b, human_speed=None) -> np.ndarray:
    return objective(table, cert, x, b, human_speed)[1].min(axis=-1)


def qmdp_action_index(table: QmdpTable, cert, x, b, human_speed=None) -> np.ndarray:
    # argmin returns the first minimizer: lowest index wins ties
    return np.argmin(objective(table, cert, x, b, human_speed)[1], axis=-1)


def qmdp_policy(table: QmdpTable, cert, x, b, human_speed=None) -> np.ndarray:
    return table.uR[qmdp_action_index(table, cert, x, b, human_speed)]
