"""Recursive Bayesian estimation over the (beta, theta) hypotheses."""
from __future__ import annotations

import logging

import numpy as np

from .config import InferenceConfig
from .dynamics import ControlBox
from .human import IntentBasis, ParamGrid, gaussian_approx, likelihood_table

log = logging.getLogger(__name__)

LIKELIHOOD_FLOOR = 1e-300


class InconsistentObservation(ValueError):
    """The observed action has (numerically) zero probability under the belief."""


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def check_belief(b, tol: float = 1e-12) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if np.any(b < 0) or abs(b.sum() - 1.0) > tol:
        raise ValueError("belief must be a probability vector")
    return b


def sticky_transition(n: int, epsilon: float) -> np.ndarray:
    """Stay with probability 1 - eps, else jump uniformly to another entry."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if n == 1:
        return np.ones((1, 1))
    T = np.full((n, n), epsilon / (n - 1))
    np.fill_diagonal(T, 1.0 - epsilon)
    return T


def measurement_update(b, likelihood=None, loglik=None) -> np.ndarray:
    """Bayes rule in log space; pass either ``likelihood`` or ``loglik``.

    Broadcasts over leading axes of ``b`` and the likelihood.
    """
    b = np.asarray(b, dtype=float)
    if loglik is None:
        with np.errstate(divide="ignore"):
            loglik = np.log(np.asarray(likelihood, dtype=float))
    with np.errstate(divide="ignore"):
        logp = np.log(b) + loglik
    top = logp.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise InconsistentObservation("observation has zero likelihood under the belief")
    w = np.exp(logp - top)
    s = w.sum(axis=-1, keepdims=True)
    if np.any(top + np.log(s) < np.log(LIKELIHOOD_FLOOR)):
        raise InconsistentObservation("observation has total likelihood below 1e-300")
    return w / s


def time_update(b, T) -> np.ndarray:
    """``b' = T^T b``; broadcasts over leading axes of ``b``."""
    out = np.asarray(b, dtype=float) @ np.asarray(T, dtype=float)
    return out / out.sum(axis=-1, keepdims=True)


def belief_step(b, T, likelihood=None, loglik=None) -> np.ndarray:
    """Measurement update followed by the time update."""
    return time_update(measurement_update(b, likelihood, loglik), T)


class BeliefFilter:
    """Binds the human model, hypothesis grid and transition model."""

    def __init__(self, basis: IntentBasis, grid: ParamGrid, actions: np.ndarray,
                 cfg: InferenceConfig | None = None, box: ControlBox | None = None):
        cfg = cfg or InferenceConfig()
        self.basis = basis
        self.grid = grid
        self.actions = np.asarray(actions, dtype=float)
        self.mode = cfg.likelihood
        if self.mode not in ("discrete", "gaussian"):
            raise ValueError(f"unknown likelihood mode {self.mode!r}")
        self.box = box
        self.T = sticky_transition(len(grid), cfg.epsilon)
        n = len(grid)
        self.prior = uniform(n) if cfg.prior is None else check_belief(cfg.prior, 1e-9)
        if len(self.prior) != n:
            raise ValueError("prior length does not match the hypothesis grid")

    def snap(self, uH) -> int:
        """Index of the nearest lattice action."""
        d = np.sum((self.actions - np.asarray(uH, dtype=float)) ** 2, axis=-1)
        return int(np.argmin(d))

    def loglik(self, y, v, uH) -> np.ndarray:
        if self.mode == "discrete":
            lik = likelihood_table(self.basis, self.grid, y, v, self.actions)[:, self.snap(uH)]
            with np.errstate(divide="ignore"):
                return np.log(lik)
        out = np.empty(len(self.grid))
        for i in range(len(self.grid)):
            g = gaussian_approx(self.basis, self.grid[i], [y, v], self.box)
            r = np.asarray(uH, float) - g.mean
            P = np.linalg.inv(g.cov)
            out[i] = -0.5 * r @ P @ r - 0.5 * np.log(np.linalg.det(2 * np.pi * g.cov))
        return out

    def step(self, b, y, v, uH) -> np.ndarray:
        """belief_step for an observed human action at lateral position y, speed v.

        Falls back to the time update of the prior belief on an inconsistent
        observation.
        """
        try:
            post = measurement_update(b, loglik=self.loglik(y, v, uH))
        except InconsistentObservation:
            log.warning("inconsistent human observation; keeping the prior belief")
            post = np.asarray(b, dtype=float)
        return time_update(post, self.T)
