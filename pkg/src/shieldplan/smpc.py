"""Scenario-tree SMPC: QP assembly over a sparse tree and the planners.

Decision variables are one control deviation ``du_n`` per non-leaf node
(shared nodes therefore share one variable) followed by one slack per soft
row. Node states are affine in the controls along the root path::

    dx_child = A dx_n + B^R du_n        (plus a fixed hypothesis offset)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cost import QuadraticCost
from .dynamics import ControlBox, LinearizedDynamics, joint_matrices, linearize, step_joint
from .qmdp import QmdpTable, terminal_value
from .qp import QpProblem, QpSolution, solve_qp
from .reachability import FailureSpec, SafetyCertificate
from .tree import ScenarioTree

log = logging.getLogger(__name__)


@dataclass
class CbfRow:
    node: int
    normal: np.ndarray
    gamma: float
    coef_dx: np.ndarray   # n^T (A + (gamma - 1) I)
    coef_du: np.ndarray   # n^T B^R
    const: float          # n^T B^H du^H

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    def value(self, dx, du) -> float:
        """Left-hand side; the soft constraint reads ``value >= -slack``."""
        return float(self.coef_dx @ dx + self.coef_du @ du + self.const)


def cbf_halfspace(cert: SafetyCertificate, x, uH, dt: float):
    """Normal ``f(x, pi^s(x), u^H) - x`` and anchor ``x``; None when degenerate."""
    x = np.asarray(x, dtype=float)
    n = step_joint(x, cert.safe_action(x), uH, dt) - x
    if np.linalg.norm(n) < 1e-9:
        log.warning("degenerate CBF normal; row skipped")
        return None
    return n, x


def cbf_constraint(lin: LinearizedDynamics, hs, gamma: float, node: int = -1) -> CbfRow:
    n, _ = hs
    A, BR, BH = lin.A, lin.BR, lin.BH
    return CbfRow(node, n, gamma, n @ (A + (gamma - 1.0) * np.eye(len(n))), n @ BR,
                  float(n @ BH @ lin.duH))


@dataclass
class PlannerOptions:
    gamma: float = 0.7
    slack_weight: float = 1e4
    use_cbf: bool = True
    proximity_weight: float = 0.0
    buffer_long: float = 8.0
    buffer_lat: float = 0.5
    spec: FailureSpec = field(default_factory=FailureSpec)
    tol: float = 1e-6
    max_iter: int = 200


@dataclass
class AssembledQp:
    problem: QpProblem
    nonleaf: np.ndarray
    var_of: dict
    S: np.ndarray       # (n_nodes, 4, nu) sensitivities of node states to controls
    offset: np.ndarray  # (n_nodes, 4) belief-mean hypothesis offsets
    rows: list
    n_ctrl: int

    def controls(self, z) -> np.ndarray:
        return z[:self.n_ctrl].reshape(-1, 2)

    def slacks(self, z) -> np.ndarray:
        return z[self.n_ctrl:]


def _offsets(tree: ScenarioTree, A, BH) -> np.ndarray:
    """Per-node belief-weighted state offset from hypothesis mean actions."""
    nh = tree.b.shape[1]
    e = np.zeros((tree.size, nh, 4))
    for c in range(1, tree.size):
        p = tree.parent[c]
        du = tree.uhat[p] - tree.uH_in[c]  # (nh, 2)
        e[c] = e[p] @ A.T + du @ BH.T
    return np.einsum("nh,nhd->nd", tree.b, e)


def leaf_quadratic(table: QmdpTable, cert, x, b, vH, steps=None):
    """Diagonal quadratic model of V_F around each leaf.

    Central differences with the table spacing; curvature floored at zero.
    Returns (value, gradient, curvature) with shapes (L,), (L, 4), (L, 4).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    L = len(x)
    h = table.grid.spacing if steps is None else np.asarray(steps, dtype=float)
    E = np.eye(4) * h
    pts = np.concatenate([x[:, None, :], x[:, None, :] + E[None], x[:, None, :] - E[None]], axis=1)
    bb = np.repeat(np.asarray(b, dtype=float)[:, None, :], 9, axis=1)
    vv = np.repeat(np.asarray(vH, dtype=float).reshape(L, 1), 9, axis=1)
    V = terminal_value(table, cert, pts, bb, vv)  # (L, 9)
    v0, vp, vm = V[:, 0], V[:, 1:5], V[:, 5:9]
    g = (vp - vm) / (2 * h)
    c = np.maximum((vp - 2 * v0[:, None] + vm) / h ** 2, 0.0)
    return v0, g, c


def _proximity_rows(x, spec: FailureSpec, buf_long, buf_lat):
    """Halfspaces ``a^T (x + dx) >= r`` keeping a node away from the failure set."""
    rows = []
    dpx = abs(x[0]) - (spec.sep_long + buf_long)
    dy = x[2] - x[3]
    dpy = abs(dy) - (spec.sep_lat + buf_lat)
    # separation: keep whichever clause is currently the better one
    if dpx >= dpy:
        s = 1.0 if x[0] >= 0 else -1.0
        rows.append((np.array([s, 0.0, 0.0, 0.0]), spec.sep_long + buf_long))
    else:
        s = 1.0 if dy >= 0 else -1.0
        rows.append((np.array([0.0, 0.0, s, -s]), spec.sep_lat + buf_lat))
    s = 1.0 if x[2] >= 0 else -1.0
    rows.append((np.array([0.0, 0.0, -s, 0.0]), -(spec.road_half_width - buf_lat)))
    return rows


def assemble_qp(tree: ScenarioTree, cost: QuadraticCost, table: QmdpTable | None,
                cert: SafetyCertificate | None, box: ControlBox, dt: float,
                opts: PlannerOptions) -> AssembledQp:
    A, BR, BH = joint_matrices(dt)
    nonleaf = np.flatnonzero(tree.t < tree.depth)
    var_of = {int(n): i for i, n in enumerate(nonleaf)}
    nu = 2 * len(nonleaf)
    N = tree.size
    S = np.zeros((N, 4, nu))
    for c in range(1, N):
        p = tree.parent[c]
        S[c] = A @ S[p]
        j = var_of[int(p)]
        S[c][:, 2 * j:2 * j + 2] += BR
    off = _offsets(tree, A, BH)

    H = np.zeros((nu, nu))
    g = np.zeros(nu)
    Wx = np.diag(cost.state_weights())
    for n in nonleaf:
        w = tree.P[n]
        if w == 0.0:
            continue
        ref = cost.reference(tree.x[n])
        d0 = tree.x[n] + off[n] - ref
        Sn = S[n]
        H += 2 * w * Sn.T @ Wx @ Sn
        g += 2 * w * Sn.T @ Wx @ d0
        j = var_of[int(n)]
        H[2 * j:2 * j + 2, 2 * j:2 * j + 2] += 2 * w * cost.w_u * np.eye(2)
        g[2 * j:2 * j + 2] += 2 * w * cost.w_u * tree.uR[n]
    leaves = tree.leaves
    if table is not None and len(leaves):
        _, grad, curv = leaf_quadratic(table, cert if table.shield_aware else None,
                                       tree.x[leaves], tree.b[leaves], tree.vH[leaves])
        for k, n in enumerate(leaves):
            w = tree.P[n]
            Sn = S[n]
            C = np.diag(curv[k])
            H += w * Sn.T @ C @ Sn
            g += w * Sn.T @ (grad[k] + C @ off[n])

    # soft rows: coefficient vector over controls, right-hand side, weight
    rows: list = []
    soft = []
    if opts.use_cbf and cert is not None:
        for n in tree.shield_nodes:
            kids = tree.children(n)
            if len(kids) == 0:
                continue
            uH = tree.uH_in[kids[0]]
            hs = cbf_halfspace(cert, tree.x[n], uH, dt)
            if hs is None:
                continue
            uH_mean = tree.b[n] @ tree.uhat[n]
            lin = linearize(tree.x[n], tree.uR[n], uH, dt, uH_mean)
            row = cbf_constraint(lin, hs, opts.gamma, int(n))
            rows.append(row)
            j = var_of[int(n)]
            coef = row.coef_dx @ S[n]
            coef[2 * j:2 * j + 2] += row.coef_du
            # coef^T du + coef_dx^T off + const >= -s
            soft.append((coef, -(row.coef_dx @ off[n] + row.const), opts.slack_weight * tree.P[n]))
    if opts.proximity_weight > 0.0:
        for n in range(N):
            z0 = tree.x[n] + off[n]
            for a, r in _proximity_rows(z0, opts.spec, opts.buffer_long, opts.buffer_lat):
                # a^T (z0 + S du) >= r
                soft.append((a @ S[n], r - a @ z0, opts.proximity_weight * tree.P[n]))

    ns = len(soft)
    nz = nu + ns
    P = np.zeros((nz, nz))
    P[:nu, :nu] = 0.5 * (H + H.T)
    q = np.zeros(nz)
    q[:nu] = g
    G = np.zeros((ns, nz))
    hvec = np.zeros(ns)
    for i, (coef, rhs, w) in enumerate(soft):
        # coef^T du + s >= rhs  ->  -coef^T du - s <= -rhs
        G[i, :nu] = -coef
        G[i, nu + i] = -1.0
        hvec[i] = -rhs
        q[nu + i] = w
    lb = np.zeros(nz)
    ub = np.full(nz, np.inf)
    uR = tree.uR[nonleaf]
    lb[:nu] = (box.lo[None, :] - uR).ravel()
    ub[:nu] = (box.hi[None, :] - uR).ravel()
    prob = QpProblem(P, q, G, hvec, lb, ub)
    return AssembledQp(prob, nonleaf, var_of, S, off, rows, nu)


def root_action(tree: ScenarioTree, qp: AssembledQp, sol: QpSolution, box: ControlBox) -> np.ndarray:
    du = qp.controls(sol.z)[qp.var_of[0]]
    return box.clip(tree.uR[0] + du)


PLANNERS = ("sharp-smpc", "sharp-qmdp", "baseline", "ablation")


@dataclass
class PlanResult:
    action: np.ndarray
    kind: str
    tree_size: int = 0
    shield_nodes: int = 0
    status: str = "n/a"
    kkt: float = 0.0
    solve_time: float = 0.0
    degraded: bool = False
    tree: ScenarioTree | None = None


class Planner:
    """One planning pipeline instance (per trial)."""

    def __init__(self, kind: str, cert: SafetyCertificate, aware: QmdpTable, agnostic: QmdpTable,
                 human, cost: QuadraticCost, box: ControlBox, dt: float,
                 opts: PlannerOptions, M: int = 70, depth: int = 10, K: int = 5,
                 similarity: float = 1e-6):
        if kind not in PLANNERS:
            raise ValueError(f"unknown planner {kind!r}")
        self.kind = kind
        self.cert = cert
        self.table = aware if kind in ("sharp-smpc", "sharp-qmdp") else agnostic
        self.human = human
        self.cost = cost
        self.box = box
        self.dt = dt
        self.opts = opts
        self.M, self.depth, self.K, self.similarity = M, depth, K, similarity
        if kind == "ablation":
            self.opts = _replace(opts, use_cbf=False, proximity_weight=0.0)
        elif kind == "baseline":
            self.opts = _replace(opts, use_cbf=False)
        else:
            self.opts = _replace(opts, proximity_weight=0.0)

    def _table_cert(self):
        return self.cert if self.table.shield_aware else None

    def qmdp_action(self, x, b, vH) -> np.ndarray:
        from .qmdp import qmdp_policy
        return qmdp_policy(self.table, self._table_cert(), x, b, vH)

    def build(self, x, b, vH, rng) -> ScenarioTree:
        from .tree import build_tree, qmdp_surrogate
        tree_cert = self.cert if self.kind == "sharp-smpc" else None
        return build_tree(x, b, vH, qmdp_surrogate(self.table, self._table_cert()), tree_cert,
                          self.human, rng, self.M, self.depth, self.K, self.similarity, dt=self.dt)

    def plan(self, x, b, vH, rng, keep_tree: bool = False) -> PlanResult:
        import time
        from .tree import TreeError
        x = np.asarray(x, dtype=float)
        if self.kind == "sharp-qmdp":
            return PlanResult(self.qmdp_action(x, b, vH), self.kind)
        t0 = time.perf_counter()
        try:
            tree = self.build(x, b, vH, rng)
        except TreeError as exc:
            log.info("tree refused (%s); QMDP fallback", exc)
            return PlanResult(self.qmdp_action(x, b, vH), self.kind, status="tree_refused", degraded=True)
        qp = assemble_qp(tree, self.cost, self.table, self._table_cert(), self.box, self.dt, self.opts)
        sol = solve_qp(qp.problem, self.opts.tol, self.opts.max_iter)
        elapsed = time.perf_counter() - t0
        res = PlanResult(np.zeros(2), self.kind, tree.size, len(tree.shield_nodes), sol.status,
                         sol.kkt, elapsed, tree=tree if keep_tree else None)
        if sol.ok:
            res.action = root_action(tree, qp, sol, self.box)
        else:
            log.warning("QP status %s; degrading to the QMDP policy", sol.status)
            res.action = self.qmdp_action(x, b, vH)
            res.degraded = True
        return res


def _replace(opts: PlannerOptions, **kw) -> PlannerOptions:
    from dataclasses import replace
    return replace(opts, **kw)
