import numpy as np
import pytest

from shieldplan import cache
from shieldplan.cost import QuadraticCost
from shieldplan.dynamics import step_joint
from shieldplan.grid import Grid4
from shieldplan.human import IntentBasis, ParamGrid, likelihood_table
from shieldplan.inference import sticky_transition
from shieldplan.qmdp import (QmdpTable, objective, qmdp_action_index, qmdp_policy, solve_qmdp,
                             terminal_value)

from oracles import enumeration_dp, interp

DT = 0.2
GRID = Grid4((-20, -6, -3, -3), (20, 6, 3, 3), (7, 5, 5, 5))  # 875 cells
UR = np.array([[-1.0, -2.0], [0.0, 0.0], [1.0, 2.0]])
UH2 = np.array([[0.0, -1.0], [0.5, 1.0]])
BASIS = IntentBasis()
COST = QuadraticCost(target_lane=1.5, vr_ref=-2.0)


def toy_table(params, T, uH, N=3, cost=COST, uR=UR):
    return solve_qmdp(GRID, None, BASIS, params, T, cost, N, uR, uH, DT, shield_aware=False)


def test_matches_enumeration_oracle():
    params = ParamGrid.from_pairs([(1.0, 0.0), (5.0, 1.0)])
    T = sticky_transition(2, 0.1)
    tab = toy_table(params, T, UH2)
    ref = enumeration_dp(GRID, BASIS, params, T, UR, UH2, COST, 3, BASIS.cruise_speed, DT)
    assert np.max(np.abs(tab.values - ref)) <= 1e-9


def test_matches_deterministic_dp():
    params = ParamGrid.from_pairs([(1.0, 1.0)])
    uh = np.array([[0.2, 0.5]])
    tab = toy_table(params, np.eye(1), uh, N=4)
    pts = GRID.points()
    V = COST.terminal(pts).reshape(GRID.shape)
    for _ in range(4):
        V = np.min([COST.stage(pts, u) + interp(GRID, V, step_joint(pts, u, uh[0], DT)) for u in UR],
                   axis=0).reshape(GRID.shape)
    assert np.max(np.abs(tab.values[0] - V)) <= 1e-9


def test_zero_cost_zero_table():
    z = QuadraticCost(0.0, 0.0, 0.0)
    tab = toy_table(ParamGrid(), sticky_transition(9, 0.05), UH2, cost=z)
    assert np.all(tab.values == 0.0)
    x = np.array([3.0, 1.0, 0.5, -0.5])
    assert terminal_value(tab, None, x, np.full(9, 1 / 9)) == 0.0


def test_nonnegative(caches):
    assert np.all(caches.aware.values >= 0) and np.all(caches.agnostic.values >= 0)
    assert np.all(np.isfinite(caches.aware.values))


def test_rejects_bad_inputs(cert):
    with pytest.raises(ValueError):
        toy_table(ParamGrid(), np.eye(9), UH2, N=0)
    with pytest.raises(ValueError):
        solve_qmdp(GRID, None, BASIS, ParamGrid(), np.eye(9), COST, 1, UR, UH2, DT, shield_aware=True)
    with pytest.raises(ValueError, match="domain"):
        solve_qmdp(GRID, cert, BASIS, ParamGrid(), np.eye(9), COST, 1, cert.uR, UH2, DT)


def hand_inner(tab, x, h, ur):
    """Stage cost plus the single-hypothesis expectation, assembled term by term."""
    lik = likelihood_table(tab.basis, tab.params, x[3], tab.basis.cruise_speed, tab.uH)[h]
    total = float(tab.cost.stage(x, ur))
    for j, uh in enumerate(tab.uH):
        succ = step_joint(x, ur, uh, tab.dt)
        for h2 in range(tab.nhyp):
            total += tab.T[h, h2] * lik[j] * float(interp(tab.grid, tab.values[h2], succ))
    return total


def test_terminal_value_point_mass_and_mixture():
    params = ParamGrid.from_pairs([(1.0, 0.0), (5.0, 1.0)])
    uR2 = UR[[0, 2]]
    tab = toy_table(params, sticky_transition(2, 0.1), UH2, uR=uR2)
    x = np.array([4.0, -1.0, 0.3, -0.9])
    for h in range(2):
        b = np.eye(2)[h]
        want = min(hand_inner(tab, x, h, u) for u in uR2)
        assert terminal_value(tab, None, x, b) == pytest.approx(want, abs=1e-9)
    want = min(0.5 * hand_inner(tab, x, 0, u) + 0.5 * hand_inner(tab, x, 1, u) for u in uR2)
    assert terminal_value(tab, None, x, [0.5, 0.5]) == pytest.approx(want, abs=1e-9)


def test_objective_affine_in_belief(caches, rng):
    tab, cert = caches.aware, caches.cert
    for _ in range(20):
        x = rng.uniform(tab.grid.lows, tab.grid.highs)
        b1, b2 = rng.dirichlet(np.ones(9)), rng.dirichlet(np.ones(9))
        lam = rng.uniform()
        mix = objective(tab, cert, x, lam * b1 + (1 - lam) * b2)[1]
        comb = lam * objective(tab, cert, x, b1)[1] + (1 - lam) * objective(tab, cert, x, b2)[1]
        assert np.allclose(mix, comb, atol=1e-9, rtol=1e-12)


def test_backup_monotone(caches, rng):
    base = caches.agnostic
    for _ in range(5):
        V1 = rng.uniform(0, 100, base.values.shape)
        V2 = V1 + rng.uniform(0, 10, base.values.shape)
        t1 = QmdpTable(**{**base.__dict__, "values": V1})
        t2 = QmdpTable(**{**base.__dict__, "values": V2})
        X = rng.uniform(base.grid.lows, base.grid.highs, size=(200, 4))
        b = rng.dirichlet(np.ones(9))
        assert np.all(terminal_value(t2, None, X, b) >= terminal_value(t1, None, X, b) - 1e-12)


def test_evaluated_action_obeys_shield(caches, rng):
    tab, cert = caches.aware, caches.cert
    X = rng.uniform(tab.grid.lows, tab.grid.highs, size=(300, 4))
    b = rng.dirichlet(np.ones(9))
    raw, eff = objective(tab, cert, X, b)
    for i, x in enumerate(X):
        for r, u in enumerate(tab.uR):
            applied, _ = cert.shield(x, u)
            k = int(np.flatnonzero(np.all(tab.uR == applied, axis=1))[0])
            assert eff[i, r] == raw[i, k]
    # the chosen action, after substitution, is never left in the shielding set inside the safe set
    idx = qmdp_action_index(tab, cert, X, b)
    for x, r in zip(X, idx):
        applied, _ = cert.shield(x, tab.uR[r])
        if cert.in_safe_set(x):
            assert not cert.in_shielding_set(x, applied)


def test_tie_breaks_to_lowest_index():
    z = QuadraticCost(0.0, 0.0, 0.0)
    tab = toy_table(ParamGrid(), np.eye(9), UH2, cost=z)
    assert qmdp_action_index(tab, None, np.zeros(4), np.full(9, 1 / 9)) == 0
    assert np.array_equal(qmdp_policy(tab, None, np.zeros(4), np.full(9, 1 / 9)), UR[0])


def test_unique_minimizer_returned(caches):
    tab, cert = caches.aware, caches.cert
    x = np.array([25.0, -5.0, -1.85, -1.85])
    b = np.full(9, 1 / 9)
    obj = objective(tab, cert, x, b)[1]
    assert np.sum(obj == obj.min()) == 1
    assert np.array_equal(qmdp_policy(tab, cert, x, b), tab.uR[np.argmin(obj)])


def test_lateral_cost_matches_one_step_greedy():
    lat = QuadraticCost(w_lat=1.0, w_speed=0.0, w_u=0.0, target_lane=1.5)
    tab = toy_table(ParamGrid(), np.eye(9), UH2, N=1, cost=lat)
    b = np.full(9, 1 / 9)
    for pyr in (-2.0, 0.0, 2.5):
        x = np.array([10.0, 0.0, pyr, -1.0])
        # human moves only p_y^H and p_x^r, which this cost ignores
        vals = [float(interp(tab.grid, tab.values[0], step_joint(x, u, UH2[0], DT))) for u in UR]
        assert qmdp_action_index(tab, None, x, b) == int(np.argmin(vals))
        step = np.sign(1.5 - pyr)
        assert np.sign(qmdp_policy(tab, None, x, b)[0]) == step


def test_table_cache_roundtrip(tmp_path):
    tab = toy_table(ParamGrid(), sticky_transition(9, 0.05), UH2)
    tab.config_hash = "abc"
    tab.save(tmp_path / "t")
    other = toy_table(ParamGrid(), sticky_transition(9, 0.05), UH2)
    other.config_hash = "abc"
    other.values = other.values * 0
    other.load_arrays(tmp_path / "t")
    assert np.array_equal(other.values, tab.values) and np.array_equal(other.greedy, tab.greedy)
    other.config_hash = "def"
    with pytest.raises(cache.StaleCacheError):
        other.load_arrays(tmp_path / "t")


def test_out_of_grid_query_warns(caches, caplog):
    with caplog.at_level("WARNING"):
        terminal_value(caches.agnostic, None, [500.0, 0, 0, 0], np.full(9, 1 / 9))
    assert "outside the QMDP grid" in caplog.text
