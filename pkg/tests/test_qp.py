import numpy as np
import pytest

from shieldplan.qp import QpProblem, kkt_residuals, solve_qp

from oracles import projected_gradient


def qp(P, q, G=None, h=None, lb=None, ub=None):
    n = len(q)
    G = np.zeros((0, n)) if G is None else np.atleast_2d(G)
    h = np.zeros(0) if h is None else np.atleast_1d(h)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, float)
    return QpProblem(np.atleast_2d(P).astype(float), np.asarray(q, float), G.astype(float),
                     h.astype(float), lb, ub)


def test_norm_in_box():
    s = solve_qp(qp(2 * np.eye(2), [0.0, 0.0], lb=[-1, -1], ub=[1, 1]))
    assert s.ok and np.allclose(s.z, 0, atol=1e-8)


def test_clamped_minimizer_with_inequality():
    # (u - 2)^2 = u^2 - 4u + 4 subject to u <= 1
    s = solve_qp(qp([[2.0]], [-4.0], G=[[1.0]], h=[1.0]))
    assert s.ok and s.z[0] == pytest.approx(1.0, abs=1e-8)
    assert s.kkt <= 1e-6


def test_infeasible_box_reported():
    s = solve_qp(qp(np.eye(2), [0.0, 0.0], lb=[1, 0], ub=[0, 1]))
    assert s.status == "infeasible" and not s.ok


def test_infeasible_rows_reported():
    s = solve_qp(qp(np.eye(1), [0.0], G=[[1.0], [-1.0]], h=[-1.0, -1.0]))
    assert not s.ok


def random_qp(rng, n=20, cond=50.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    P = Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T
    q = rng.normal(scale=10, size=n)
    lb = -rng.uniform(0.1, 1.0, n)
    ub = rng.uniform(0.1, 1.0, n)
    return P, q, lb, ub


def test_random_box_qps_against_projected_gradient():
    rng = np.random.default_rng(2)
    for _ in range(8):
        P, q, lb, ub = random_qp(rng)
        s = solve_qp(qp(P, q, lb=lb, ub=ub))
        assert s.ok and s.kkt <= 1e-6
        _, fref = projected_gradient(P, q, lb, ub)
        assert abs(s.objective - fref) <= 1e-5


def test_random_general_qps_kkt():
    rng = np.random.default_rng(4)
    for _ in range(10):
        P, q, lb, ub = random_qp(rng)
        G = rng.normal(size=(8, 20))
        h = rng.uniform(0.0, 1.0, 8)  # z = 0 is strictly feasible
        s = solve_qp(qp(P, q, G, h, lb, ub))
        assert s.ok and s.kkt <= 1e-6
        assert np.all(G @ s.z <= h + 1e-7) and np.all(s.z >= lb - 1e-7) and np.all(s.z <= ub + 1e-7)


def test_badly_scaled_qp_polished():
    # large linear term relative to curvature leaves a dual residual floor before polishing
    rng = np.random.default_rng(9)
    P, _, lb, ub = random_qp(rng, cond=1e3)
    q = rng.normal(scale=7.5e3, size=20)
    s = solve_qp(qp(P, q, lb=lb, ub=ub))
    assert s.ok and s.kkt <= 1e-6


def test_deterministic():
    rng = np.random.default_rng(6)
    P, q, lb, ub = random_qp(rng)
    a = solve_qp(qp(P, q, lb=lb, ub=ub))
    b = solve_qp(qp(P, q, lb=lb, ub=ub))
    assert np.array_equal(a.z, b.z)


def test_kkt_residuals_by_hand():
    p = qp([[2.0]], [-4.0], G=[[1.0]], h=[1.0])
    # optimum z = 1 with multiplier 2 on the row: 2*1 - 4 + 2 = 0
    prim, dual, comp = kkt_residuals(p, np.array([1.0]), np.array([2.0]), np.zeros(1), np.zeros(1))
    assert (prim, dual, comp) == (0.0, 0.0, 0.0)
    prim, dual, _ = kkt_residuals(p, np.array([1.5]), np.array([0.0]), np.zeros(1), np.zeros(1))
    assert prim == pytest.approx(0.5) and dual == pytest.approx(1.0)  # |2(1.5) - 4|


def test_dump(tmp_path):
    p = qp([[2.0, 0.0], [0.0, 1.0]], [1.0, 0.0], G=[[1.0, 1.0]], h=[1.0], lb=[-1, -1], ub=[1, 1])
    p.dump(tmp_path / "qp.txt")
    lines = (tmp_path / "qp.txt").read_text().splitlines()
    assert lines[0] == "# n=2 m=1"
    assert "P 0 0 2" in lines and "G 0 1 1" in lines
