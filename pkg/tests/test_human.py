import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldplan.config import DynamicsConfig
from shieldplan.dynamics import AgentState, ControlBox, human_box
from shieldplan.human import (DiscreteDistribution, HumanParams, IntentBasis, ParamGrid,
                              action_likelihood, gaussian_approx, likelihood_table, q_value,
                              sample_action, softmax_neg)

BASIS = IntentBasis()
ACTIONS = human_box(DynamicsConfig()).lattice(3)
LEFT = AgentState(0.0, 1.85, 0.0, 30.0)


def test_params_validate():
    with pytest.raises(ValueError):
        HumanParams(-0.1, 0.5)
    with pytest.raises(ValueError):
        HumanParams(1.0, 1.5)
    with pytest.raises(ValueError):
        ParamGrid(betas=())


def test_param_grid_defaults():
    g = ParamGrid()
    assert len(g) == 9
    assert (g[0].beta, g[0].theta) == (0.1, 0.0)
    assert (g[8].beta, g[8].theta) == (10.0, 1.0)


def test_hessian_positive_definite():
    H = BASIS.hessian()
    assert np.allclose(H, H.T)
    assert np.all(np.linalg.eigvalsh(H) > 0)


def test_q_value_convex_combination(rng):
    for _ in range(50):
        u = rng.uniform(-3, 3, 2)
        y, v = rng.uniform(-4, 4), rng.uniform(20, 40)
        q1 = BASIS.basis(0, y, v, u)
        q2 = BASIS.basis(1, y, v, u)
        assert q_value(BASIS, 1.0, [y, v], u) == q1
        assert q_value(BASIS, 0.5, [y, v], u) == pytest.approx(0.5 * (q1 + q2), abs=1e-12)


def test_q_value_zero_at_lane_center_minimizer():
    assert q_value(BASIS, 1.0, LEFT, [0.0, 0.0]) == 0.0
    assert np.array_equal(BASIS.minimizer(1.0, 1.85, 30.0), [0.0, 0.0])


def test_likelihood_beta_zero_uniform():
    d = action_likelihood(BASIS, HumanParams(0.0, 0.5), LEFT, ACTIONS)
    assert np.allclose(d.probs, 1 / len(ACTIONS), atol=1e-15)


def test_likelihood_large_beta_concentrates():
    d = action_likelihood(BASIS, HumanParams(1e6, 1.0), LEFT, ACTIONS)
    q = q_value(BASIS, 1.0, LEFT, ACTIONS)
    assert d.probs[np.argmin(q)] >= 1 - 1e-6


def test_softmax_two_actions():
    p = softmax_neg(np.array([0.0, 1.0]), 1.0)
    assert p == pytest.approx([0.7311, 0.2689], abs=1e-4)
    assert p[0] == pytest.approx(1 / (1 + np.exp(-1.0)), abs=1e-15)


def test_likelihood_empty_actions():
    with pytest.raises(ValueError):
        action_likelihood(BASIS, HumanParams(1.0, 0.5), LEFT, np.zeros((0, 2)))


finite_q = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12)


@settings(max_examples=300, deadline=None)
@given(finite_q, st.floats(0, 1e6))
def test_softmax_normalized(q, beta):
    p = softmax_neg(np.array(q), beta)
    assert abs(p.sum() - 1) <= 1e-12 and np.all(p >= 0)


# dyadic Q values and integer shifts keep q + c exact, so any difference
# comes from softmax_neg and not from rounding the shifted input
dyadic_q = st.lists(st.integers(-2**20, 2**20).map(lambda k: k / 1024), min_size=1, max_size=12)


@settings(max_examples=300, deadline=None)
@given(dyadic_q, st.floats(0, 1e6), st.integers(-1000, 1000))
def test_softmax_shift_invariant(q, beta, c):
    q = np.array(q)
    assert np.all((q + c) - c == q)
    assert np.allclose(softmax_neg(q + c, beta), softmax_neg(q, beta), atol=1e-12, rtol=0)


def test_softmax_shift_invariant_large_beta():
    q = np.array([0.0, 10 / 1024])
    assert np.allclose(softmax_neg(q + 1.0, 40472.0), softmax_neg(q, 40472.0), atol=1e-12, rtol=0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-4, 4), st.floats(15, 45), st.floats(0, 1), st.floats(1e-3, 1e6))
def test_likelihood_argmax_is_q_argmin(y, v, theta, beta):
    d = action_likelihood(BASIS, HumanParams(beta, theta), [y, v], ACTIONS)
    q = q_value(BASIS, theta, [y, v], ACTIONS)
    # exact ties occur (e.g. steering 0.15 m off a lane center with unit effort
    # costs the same as holding 0.35 m off), so rounding-level gaps count as ties
    assert q[np.argmax(d.probs)] <= q.min() + 1e-12 * max(1.0, abs(q.min()))


def test_likelihood_table_matches_per_hypothesis():
    g = ParamGrid()
    tab = likelihood_table(BASIS, g, 0.7, 28.0, ACTIONS)
    for i in range(len(g)):
        d = action_likelihood(BASIS, g[i], [0.7, 28.0], ACTIONS)
        assert np.allclose(tab[i], d.probs, atol=1e-15)


def test_gaussian_covariance_scaling():
    a = gaussian_approx(BASIS, HumanParams(1.0, 0.5), LEFT)
    b = gaussian_approx(BASIS, HumanParams(2.0, 0.5), LEFT)
    assert np.allclose(b.cov, a.cov / 2, atol=1e-15)


def test_gaussian_beta_zero_rejected():
    with pytest.raises(ValueError):
        gaussian_approx(BASIS, HumanParams(0.0, 0.5), LEFT)


def test_gaussian_mean_is_analytic_minimizer():
    # stationarity of the quadratic written out per axis
    y, v, dt = 0.0, 30.0, BASIS.dt
    g = gaussian_approx(BASIS, HumanParams(1.0, 1.0), [y, v])
    vl = dt * (1.85 - y) / (dt ** 2 + 0.1)
    assert g.mean == pytest.approx([vl, 0.0], abs=1e-12)
    assert g.mean[0] > 0  # toward the left lane
    # gradient of Q vanishes at the mean
    eps = 1e-6
    for k in range(2):
        e = np.eye(2)[k] * eps
        grad = (q_value(BASIS, 1.0, [y, v], g.mean + e) - q_value(BASIS, 1.0, [y, v], g.mean - e)) / (2 * eps)
        assert abs(grad) < 1e-6


def test_gaussian_mean_clamped():
    box = ControlBox((-0.5, 0.5), (-3, 3))
    g = gaussian_approx(BASIS, HumanParams(1.0, 1.0), [-4.0, 30.0], box)
    assert g.mean[0] == 0.5


def test_gaussian_mean_matches_discrete_mode():
    g = gaussian_approx(BASIS, HumanParams(5.0, 1.0), LEFT)
    d = action_likelihood(BASIS, HumanParams(5.0, 1.0), LEFT, ACTIONS)
    assert np.array_equal(d.mode(), g.mean)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1e6), st.floats(0, 1))
def test_gaussian_covariance_spd(beta, theta):
    c = gaussian_approx(BASIS, HumanParams(beta, theta), LEFT).cov
    assert np.allclose(c, c.T) and np.all(np.linalg.eigvalsh(c) > 0)


def test_sample_point_mass():
    d = DiscreteDistribution(ACTIONS[:3], np.array([0.0, 1.0, 0.0]))
    r = np.random.default_rng(0)
    assert all(np.array_equal(sample_action(d, r), ACTIONS[1]) for _ in range(20))


def test_sample_deterministic():
    d = action_likelihood(BASIS, HumanParams(1.0, 0.5), LEFT, ACTIONS)
    a = sample_action(d, np.random.default_rng(7))
    b = sample_action(d, np.random.default_rng(7))
    assert np.array_equal(a, b)
    g = gaussian_approx(BASIS, HumanParams(1.0, 0.5), LEFT)
    assert np.array_equal(sample_action(g, np.random.default_rng(7)), sample_action(g, np.random.default_rng(7)))


def test_sample_frequencies():
    p = softmax_neg(np.array([0.0, 1.0]), 1.0)
    d = DiscreteDistribution(np.array([[0.0, 0.0], [1.0, 0.0]]), p)
    r = np.random.default_rng(11)
    draws = np.array([sample_action(d, r)[0] for _ in range(100_000)])
    assert abs(np.mean(draws == 0.0) - 0.7311) < 0.01
