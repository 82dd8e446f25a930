"""Convex QP container and a backend wrapper with KKT diagnostics.

Problem form::

    min  1/2 z^T P z + q^T z
    s.t. G z <= h,   lb <= z <= ub

The interior-point solver Clarabel does the work; residuals are recomputed
here from the returned primal/dual pair so every backend is judged alike.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, z) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)

    def dump(self, path) -> None:
        """Sparse triplet text: one ``name row col value`` line per nonzero."""
        with open(path, "w") as fh:
            fh.write(f"# n={self.n} m={len(self.h)}\n")
            for name, M in (("P", self.P), ("G", self.G)):
                r, c = np.nonzero(M)
                for i, j in zip(r, c):
                    fh.write(f"{name} {i} {j} {M[i, j]:.17g}\n")
            for name, v in (("q", self.q), ("h", self.h), ("lb", self.lb), ("ub", self.ub)):
                for i, val in enumerate(v):
                    fh.write(f"{name} {i} 0 {val:.17g}\n")


@dataclass
class QpSolution:
    z: np.ndarray
    status: str
    objective: float
    primal_residual: float
    dual_residual: float
    complementarity: float
    iterations: int = 0
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    @property
    def kkt(self) -> float:
        return max(self.primal_residual, self.dual_residual, self.complementarity)


def kkt_residuals(p: QpProblem, z, y_G, y_lb, y_ub) -> tuple[float, float, float]:
    """Primal infeasibility, stationarity and complementarity (inf-norms).

    Multipliers are nonnegative: ``y_G`` for ``G z <= h``, ``y_lb`` for
    ``z >= lb`` and ``y_ub`` for ``z <= ub``.
    """
    viol = [0.0]
    if len(p.h):
        viol.append(float(np.max(p.G @ z - p.h)))
    viol.append(float(np.max(p.lb - z)))
    viol.append(float(np.max(z - p.ub)))
    prim = max(0.0, max(viol))
    grad = p.P @ z + p.q + (p.G.T @ y_G if len(p.h) else 0.0) - y_lb + y_ub
    dual = float(np.max(np.abs(grad))) if len(grad) else 0.0
    comp = 0.0
    if len(p.h):
        comp = max(comp, float(np.max(np.abs(y_G * np.minimum(p.h - p.G @ z, 1e12)))))
    fin_lb, fin_ub = np.isfinite(p.lb), np.isfinite(p.ub)
    if fin_lb.any():
        comp = max(comp, float(np.max(np.abs(y_lb[fin_lb] * (z - p.lb)[fin_lb]))))
    if fin_ub.any():
        comp = max(comp, float(np.max(np.abs(y_ub[fin_ub] * (p.ub - z)[fin_ub]))))
    return prim, dual, comp


def _polish(p: QpProblem, z, y_G, y_lb, y_ub, active_tol: float = 1e-7):
    """Re-solve the KKT equations on the active set guessed from an interior solution.

    Returns ``(z, y_G, y_lb, y_ub, prim, dual, comp)`` or None when the guess
    yields negative multipliers or a singular system.
    """
    n = p.n
    rows, rhs, kinds = [], [], []
    if len(p.h):
        act = np.flatnonzero((p.h - p.G @ z) <= active_tol * (1.0 + np.abs(p.h)) )
        act = act[y_G[act] > 0.0] if act.size else act
        rows.append(p.G[act])
        rhs.append(p.h[act])
        kinds += [("G", i) for i in act]
    eye = np.eye(n)
    for name, bound, sign, y in (("lb", p.lb, -1.0, y_lb), ("ub", p.ub, 1.0, y_ub)):
        fin = np.isfinite(bound)
        act = np.flatnonzero(fin & (np.abs(z - np.where(fin, bound, 0.0)) <= active_tol * (1.0 + np.abs(np.where(fin, bound, 0.0)))))
        rows.append(sign * eye[act])
        rhs.append(sign * bound[act])
        kinds += [(name, i) for i in act]
    A = np.vstack(rows) if rows else np.zeros((0, n))
    bvec = np.concatenate(rhs) if rhs else np.zeros(0)
    m = A.shape[0]
    K = np.block([[p.P, A.T], [A, np.zeros((m, m))]])
    try:
        sol = np.linalg.solve(K, np.concatenate([-p.q, bvec]))
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    zp, lam = sol[:n], sol[n:]
    if np.any(lam < -1e-9):
        return None
    lam = np.maximum(lam, 0.0)
    yg, yl, yu = np.zeros(len(p.h)), np.zeros(n), np.zeros(n)
    for (name, i), v in zip(kinds, lam):
        {"G": yg, "lb": yl, "ub": yu}[name][i] = v
    return (zp, yg, yl, yu) + kkt_residuals(p, zp, yg, yl, yu)


_STATUS = {
    "Solved": "optimal",
    "AlmostSolved": "inaccurate",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
    "MaxIterations": "max_iter",
    "MaxTime": "max_iter",
    "NumericalError": "numerical_error",
    "InsufficientProgress": "inaccurate",
}


def solve_qp(p: QpProblem, tol: float = 1e-6, max_iter: int = 200) -> QpSolution:
    n = p.n
    if np.any(p.lb > p.ub):
        return QpSolution(np.full(n, np.nan), "infeasible", np.nan, np.inf, np.inf, np.inf)
    fin_lb, fin_ub = np.isfinite(p.lb), np.isfinite(p.ub)
    I = sp.identity(n, format="csr")
    blocks = [sp.csr_matrix(p.G)] if len(p.h) else []
    rhs = [p.h] if len(p.h) else []
    blocks += [-I[fin_lb], I[fin_ub]]
    rhs += [-p.lb[fin_lb], p.ub[fin_ub]]
    A = sp.vstack(blocks, format="csc")
    b = np.concatenate(rhs)
    P = sp.triu(sp.csc_matrix(p.P), format="csc")
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    tight = min(1e-9, tol * 1e-2)
    settings.tol_gap_abs = tight
    settings.tol_gap_rel = tight
    settings.tol_feas = tight
    settings.tol_ktratio = 1e-7
    solver = clarabel.DefaultSolver(P, p.q, A, b, [clarabel.NonnegativeConeT(A.shape[0])], settings)
    res = solver.solve()
    status = _STATUS.get(str(res.status).split(".")[-1], "numerical_error")
    z = np.asarray(res.x, dtype=float)
    y = np.asarray(res.z, dtype=float)
    m = len(p.h)
    y_G = y[:m]
    nl = int(fin_lb.sum())
    y_lb = np.zeros(n)
    y_ub = np.zeros(n)
    y_lb[fin_lb] = y[m:m + nl]
    y_ub[fin_ub] = y[m + nl:]
    prim, dual, comp = kkt_residuals(p, z, y_G, y_lb, y_ub)
    if status in ("optimal", "inaccurate") and max(prim, dual, comp) > 0.1 * tol:
        polished = _polish(p, z, y_G, y_lb, y_ub)
        if polished is not None and max(polished[4:]) < max(prim, dual, comp):
            z, y_G, y_lb, y_ub, prim, dual, comp = polished
            if status == "inaccurate" and max(prim, dual, comp) <= tol:
                status = "optimal"
    if status == "optimal" and max(prim, dual, comp) > tol:
        log.debug("solver reported optimal but KKT residual %.2e exceeds %.1e", max(prim, dual, comp), tol)
        status = "inaccurate"
    return QpSolution(z, status, p.objective(z), prim, dual, comp, int(res.iterations), float(res.solve_time))
