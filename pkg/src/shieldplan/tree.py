"""Sparse scenario tree: shielded forward simulation with diversity branching.

A rollout from a node follows the surrogate policy (filtered by the
shield) and the belief-weighted most likely human action. New scenarios
branch from the earliest eligible node with the sampled human action whose
scenario lies farthest from the ones already in the tree.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .dynamics import ControlBox, step_joint
from .human import IntentBasis, ParamGrid, likelihood_table
from .inference import measurement_update, time_update
from .qmdp import QmdpTable, qmdp_action_index
from .reachability import SafetyCertificate

log = logging.getLogger(__name__)


class TreeError(RuntimeError):
    pass


@dataclass
class HumanModel:
    """Everything the planner needs about the human."""

    basis: IntentBasis
    params: ParamGrid
    actions: np.ndarray  # U^H lattice
    T: np.ndarray
    box: ControlBox | None = None

    def likelihoods(self, x, vH) -> np.ndarray:
        """P(u | x^H, h) with shape (P, nh, nU)."""
        return likelihood_table(self.basis, self.params, x[..., 3], vH, self.actions)

    def means(self, x, vH) -> np.ndarray:
        """Per-hypothesis Gaussian means (clamped), shape (P, nh, 2)."""
        m = self.basis.minimizer(self.params.theta, np.asarray(x)[..., 3:4], np.asarray(vH)[..., None])
        return m if self.box is None else self.box.clip(m)

    def covariances(self) -> np.ndarray:
        Lam = self.basis.hessian()
        inv = np.linalg.inv(Lam)
        return inv[None] / np.where(self.params.beta > 0, self.params.beta, np.nan)[:, None, None]


@dataclass
class ScenarioTree:
    parent: np.ndarray
    t: np.ndarray
    x: np.ndarray
    b: np.ndarray
    vH: np.ndarray
    uR: np.ndarray       # robot action applied at the node (nan on leaves)
    uH_in: np.ndarray    # human action on the edge from the parent (nan at the root)
    uhat: np.ndarray     # per-hypothesis Gaussian means at the node, (n, nh, 2)
    Pbar: np.ndarray
    P_raw: np.ndarray
    P: np.ndarray
    shielded: np.ndarray
    depth: int
    cap: int
    cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    attempts: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.t)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.t == self.depth)

    @property
    def shield_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.shielded)

    def children(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.parent == n)

    def path(self, n: int) -> list[int]:
        out = [int(n)]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.size):
            nodes.append({
                "id": i,
                "parent": int(self.parent[i]) if self.parent[i] >= 0 else None,
                "t": int(self.t[i]),
                "x": self.x[i].tolist(),
                "belief": self.b[i].tolist(),
                "human_speed": float(self.vH[i]),
                "uR": None if np.isnan(self.uR[i, 0]) else self.uR[i].tolist(),
                "uH_in": None if np.isnan(self.uH_in[i, 0]) else self.uH_in[i].tolist(),
                "Pbar": float(self.Pbar[i]),
                "P": float(self.P[i]),
                "shielded": bool(self.shielded[i]),
            })
        return {"depth": self.depth, "cap": self.cap, "nodes": nodes}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def scenario_distance(xi1, xi2, H=None) -> float:
    """``(xi1 - xi2)^T H (xi1 - xi2)``; ``H`` may be a matrix or a diagonal vector."""
    xi1 = np.asarray(xi1, dtype=float).ravel()
    xi2 = np.asarray(xi2, dtype=float).ravel()
    if xi1.shape != xi2.shape:
        raise ValueError("scenarios must have equal length")
    d = xi1 - xi2
    if H is None:
        return float(d @ d)
    H = np.asarray(H, dtype=float)
    return float(d @ (H * d)) if H.ndim == 1 else float(d @ H @ d)


def normalize_path_probs(tree: ScenarioTree) -> ScenarioTree:
    P = tree.P_raw.copy()
    for k in np.unique(tree.t):
        sel = tree.t == k
        s = P[sel].sum()
        if not s > 0:
            raise TreeError(f"zero total path probability at depth {k}")
        P[sel] /= s
    tree.P = P
    return tree


class _Builder:
    """Growable node arrays plus the rollout machinery."""

    def __init__(self, surrogate, cert, human: HumanModel, depth: int, cap: int,
                 K: int, similarity: float, H_state: float, H_belief: float, dt: float):
        self.surrogate = surrogate
        self.cert = cert
        self.human = human
        self.depth = depth
        self.cap = cap
        self.K = K
        self.dt = dt
        nh = len(human.params)
        self.nh = nh
        self.nU = len(human.actions)
        n = cap + depth + 2
        self.parent = np.full(n, -1, dtype=np.int64)
        self.t = np.zeros(n, dtype=np.int64)
        self.x = np.zeros((n, 4))
        self.b = np.zeros((n, nh))
        self.vH = np.zeros(n)
        self.uR = np.full((n, 2), np.nan)
        self.uH_in = np.full((n, 2), np.nan)
        self.uhat = np.zeros((n, nh, 2))
        self.Pbar = np.ones(n)
        self.P = np.ones(n)
        self.shielded = np.zeros(n, dtype=bool)
        self.attempts = np.zeros(n, dtype=np.int64)
        self.m = 0
        self.Hs, self.Hb = H_state, H_belief
        self.threshold = similarity * (depth + 1) * (4 + nh)
        self.compiled = isinstance(surrogate, QmdpSurrogate) and surrogate.matches(human)

    # -- batched one-step simulation -------------------------------------
    def robot_actions(self, x, b, vH):
        uR = self.surrogate(x, b, vH)
        shielded = np.zeros(len(x), dtype=bool)
        if self.cert is not None:
            shielded = self.cert.in_shielding_set(x, uR)
            if np.any(shielded):
                uR = uR.copy()
                uR[shielded] = self.cert.safe_action(x[shielded])
        return uR, shielded

    def step(self, x, b, vH, forced=None):
        """One tree step for P parallel nodes; ``forced`` holds lattice indices or -1."""
        if not self.compiled:
            return self.step_reference(x, b, vH, forced)
        P = len(x)
        forced = np.full(P, -1, dtype=np.int64) if forced is None else np.asarray(forced, dtype=np.int64)
        r_idx = np.empty(P, dtype=np.int64)
        h_idx = np.empty(P, dtype=np.int64)
        shielded = np.empty(P, dtype=np.bool_)
        Pbar, vn = np.empty(P), np.empty(P)
        xn, bn = np.empty((P, 4)), np.empty((P, self.nh))
        kernels.tree_step(np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(b, dtype=float),
                          np.ascontiguousarray(vH, dtype=float), forced,
                          *self.surrogate.kernel_args(self.cert),
                          r_idx, shielded, h_idx, Pbar, xn, vn, bn)
        return self.surrogate.table.uR[r_idx], shielded, self.human.actions[h_idx], Pbar, xn, vn, bn

    def step_reference(self, x, b, vH, forced=None):
        """Plain numpy version of :meth:`step` for any surrogate callable."""
        uR, shielded = self.robot_actions(x, b, vH)
        lik = self.human.likelihoods(x, vH)  # (P, nh, nU)
        mix = np.einsum("ph,phu->pu", b, lik)
        idx = np.argmax(mix, axis=-1)
        if forced is not None:
            idx = np.where(forced >= 0, forced, idx)
        rows = np.arange(len(x))
        uH = self.human.actions[idx]
        Pbar = mix[rows, idx]
        xn = step_joint(x, uR, uH, self.dt)
        vn = np.maximum(vH + uH[:, 1] * self.dt, 0.0)
        bn = time_update(measurement_update(b, lik[rows, :, idx]), self.human.T)
        return uR, shielded, uH, Pbar, xn, vn, bn

    def rollout(self, x0, b0, v0, t0, forced):
        """Simulate ``len(forced)`` scenarios from a common node to the horizon."""
        P = len(forced)
        steps = self.depth - t0
        xs = np.zeros((steps + 1, P, 4))
        bs = np.zeros((steps + 1, P, self.nh))
        vs = np.zeros((steps + 1, P))
        uRs = np.zeros((steps, P, 2))
        shs = np.zeros((steps, P), dtype=bool)
        uHs = np.zeros((steps, P, 2))
        Pbs = np.zeros((steps, P))
        xs[0], bs[0], vs[0] = x0, b0, v0
        f = np.asarray(forced)
        for k in range(steps):
            uRs[k], shs[k], uHs[k], Pbs[k], xs[k + 1], vs[k + 1], bs[k + 1] = self.step(
                xs[k], bs[k], vs[k], f if k == 0 else None)
        return dict(x=xs, b=bs, v=vs, uR=uRs, sh=shs, uH=uHs, Pbar=Pbs)

    # -- node bookkeeping --------------------------------------------------
    def add_root(self, x, b, vH):
        self.x[0], self.b[0], self.vH[0] = x, b, vH
        self.t[0] = 0
        self.P[0] = self.Pbar[0] = 1.0
        self.uhat[0] = self.human.means(x[None], np.atleast_1d(vH))[0]
        self.m = 1

    def attach(self, start: int, ro: dict, j: int):
        """Append rollout ``j`` below node ``start``."""
        node = start
        steps = ro["uR"].shape[0]
        for k in range(steps):
            # the node's robot action is deterministic, so re-setting it is harmless
            self.uR[node] = ro["uR"][k, j]
            self.shielded[node] = ro["sh"][k, j]
            c = self.m
            self.parent[c] = node
            self.t[c] = self.t[node] + 1
            self.x[c] = ro["x"][k + 1, j]
            self.b[c] = ro["b"][k + 1, j]
            self.vH[c] = ro["v"][k + 1, j]
            self.uH_in[c] = ro["uH"][k, j]
            self.Pbar[c] = ro["Pbar"][k, j]
            self.P[c] = self.P[node] * self.Pbar[c]
            self.m += 1
            node = c
        if steps:
            xs = ro["x"][1:, j]
            self.uhat[self.m - steps:self.m] = self.human.means(xs, ro["v"][1:, j])

    def scenario(self, leaf: int) -> np.ndarray:
        path = []
        n = leaf
        while n >= 0:
            path.append(n)
            n = self.parent[n]
        path = path[::-1]
        return self._xi(self.x[path], self.b[path])

    def _xi(self, xs, bs) -> np.ndarray:
        return np.concatenate([np.sqrt(self.Hs) * xs, np.sqrt(self.Hb) * bs], axis=-1)

    def branch(self, rng: np.random.Generator):
        """GetBranchNode: returns (node, lattice index, rollout, column) or None."""
        while True:
            n = self.m
            elig = np.flatnonzero((self.t[:n] < self.depth) & (self.attempts[:n] < self.nU - 1))
            if elig.size == 0:
                return None
            # smallest time step, then highest path probability, then lowest id
            order = np.lexsort((elig, -self.P[elig], self.t[elig]))
            node = int(elig[order[0]])
            self.attempts[node] += 1
            x, b, v = self.x[node], self.b[node], self.vH[node]
            lik = self.human.likelihoods(x[None], np.atleast_1d(v))[0]
            mix = b @ lik
            mix = mix / mix.sum()
            cand = rng.choice(self.nU, size=self.K, p=mix)
            ro = self.rollout(x, b, v, int(self.t[node]), cand)
            # candidate scenarios: prefix to the node plus the rollout
            prefix = self.scenario(node)[:-1]
            leaves = np.flatnonzero(self.t[:n] == self.depth)
            existing = [self.scenario(l).ravel() for l in leaves]
            best, best_d = -1, -np.inf
            for j in range(self.K):
                tail = self._xi(ro["x"][:, j], ro["b"][:, j])
                xi = np.concatenate([prefix, tail]).ravel()
                # with no scenario yet every candidate is infinitely novel
                d = min((float(np.sum((e - xi) ** 2)) for e in existing), default=np.inf)
                if d > best_d:
                    best, best_d = j, d
            if best_d > self.threshold:
                return node, int(cand[best]), ro, best

    def finish(self) -> ScenarioTree:
        n = self.m
        tree = ScenarioTree(
            self.parent[:n].copy(), self.t[:n].copy(), self.x[:n].copy(), self.b[:n].copy(),
            self.vH[:n].copy(), self.uR[:n].copy(), self.uH_in[:n].copy(), self.uhat[:n].copy(),
            self.Pbar[:n].copy(), self.P[:n].copy(), self.P[:n].copy(), self.shielded[:n].copy(),
            self.depth, self.cap, self.human.covariances(), self.attempts[:n].copy())
        return normalize_path_probs(tree)


class QmdpSurrogate:
    """Greedy QMDP policy, shield-substituted when the table is shield-aware.

    Trees built with this surrogate run their rollouts in a compiled kernel.
    """

    def __init__(self, table: QmdpTable, cert: SafetyCertificate | None):
        self.table = table
        self.cert = cert if table.shield_aware else None
        self._args = {}

    def __call__(self, x, b, vH):
        return self.table.uR[qmdp_action_index(self.table, self.cert, x, b, vH)]

    def matches(self, human: HumanModel) -> bool:
        """True when the human model is the one the table was solved with."""
        tb = self.table
        return (human.basis == tb.basis and np.array_equal(human.actions, tb.uH)
                and np.array_equal(human.T, tb.T) and np.array_equal(human.params.beta, tb.params.beta)
                and np.array_equal(human.params.theta, tb.params.theta))

    def kernel_args(self, tree_cert: SafetyCertificate | None) -> tuple:
        key = id(tree_cert)
        if key not in self._args:
            tb = self.table
            cert = self.cert if self.cert is not None else tree_cert
            if cert is None:
                cv = np.zeros((1, 2, 2, 2, 2))
                cl, cs, cc, margin = np.zeros(4), np.ones(4), np.full(4, 2, dtype=np.int64), 0.0
            else:
                g = cert.grid
                cv = cert.values.reshape((1,) + g.shape)
                cl, cs, cc, margin = g.lows, g.spacing, np.asarray(g.counts, dtype=np.int64), cert.margin
            if tree_cert is not None and self.cert is not None and tree_cert is not self.cert:
                raise ValueError("tree and surrogate must share one certificate")
            bs, c = tb.basis, tb.cost
            basis_p = np.array([bs.lane_centers[0], bs.lane_centers[1], bs.cruise_speed, bs.w_lane,
                                bs.w_speed, bs.w_effort, bs.dt])
            no_pass = c.pass_distance is None or c.pass_lane is None
            cost_p = np.array([c.w_lat, c.w_speed, c.w_u, c.target_lane, c.vr_ref,
                               np.nan if no_pass else c.pass_distance,
                               0.0 if no_pass else c.pass_lane])
            g = tb.grid
            self._args[key] = (
                tb.values, g.lows, g.spacing, np.asarray(g.counts, dtype=np.int64), tb.T,
                cv, cl, cs, cc, float(margin), tb.uR, tb.uH, float(tb.dt),
                tb.params.beta.astype(float), tb.params.theta.astype(float), basis_p, cost_p,
                self.cert is not None, tree_cert is not None)
        return self._args[key]


def qmdp_surrogate(table: QmdpTable, cert: SafetyCertificate | None) -> QmdpSurrogate:
    return QmdpSurrogate(table, cert)


def build_tree(x, b, vH, surrogate: Callable, cert: SafetyCertificate | None, human: HumanModel,
               rng: np.random.Generator, M: int = 70, depth: int = 10, K: int = 5,
               similarity: float = 1e-6, H_state: float = 1.0, H_belief: float = 0.0,
               dt: float = 0.2) -> ScenarioTree:
    """Sparse scenario tree from joint state ``x``, belief ``b`` and human speed ``vH``.

    ``cert=None`` builds a shield-free tree (no substitution, no shielding
    nodes).
    """
    if M < 1 or depth < 1:
        raise ValueError("need M >= 1 and depth >= 1")
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    if cert is not None and not cert.in_safe_set(x):
        raise TreeError("root state lies outside the safe set; shield first")
    bld = _Builder(surrogate, cert, human, depth, M, K, similarity, H_state, H_belief, dt)
    bld.add_root(x, b, float(vH))
    ro = bld.rollout(x, b, float(vH), 0, np.array([-1]))
    bld.attach(0, ro, 0)
    while bld.m <= M:
        br = bld.branch(rng)
        if br is None:
            break
        node, _, ro, j = br
        bld.attach(node, ro, j)
    return bld.finish()


def get_branch_node(tree_builder: _Builder, rng: np.random.Generator):
    """Expose the branching step for inspection and testing."""
    return tree_builder.branch(rng)
