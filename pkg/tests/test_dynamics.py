import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldplan.config import DynamicsConfig
from shieldplan.dynamics import (AgentState, assemble_joint, bicycle_jacobians,
                                 joint_matrices, linearize, robot_box, split_joint, step_agent,
                                 step_bicycle, step_joint, wrap_angle)

from oracles import fd_bicycle_jacobians

finite = st.floats(-50, 50, allow_nan=False)


def euler_oracle(s, steer, accel, dt, L=2.7, n=1000):
    x, y, psi, v = s.x, s.y, s.heading, s.speed
    h = dt / n
    for _ in range(n):
        x, y, psi, v = (x + v * math.cos(psi) * h, y + v * math.sin(psi) * h,
                        psi + v * math.tan(steer) / L * h, v + accel * h)
    return np.array([x, y, psi, v])


def test_bicycle_zero_speed_fixed_point():
    s = AgentState(1.0, -2.0, 0.3, 0.0)
    assert step_bicycle(s, 0.0, 0.0, 0.2) == s


def test_bicycle_straight_line():
    s = step_bicycle(AgentState(0.0, 0.0, 0.0, 30.0), 0.0, 0.0, 0.2)
    assert s.x == pytest.approx(6.0, abs=1e-12)
    assert (s.y, s.heading, s.speed) == (0.0, 0.0, 30.0)


def test_bicycle_turning_matches_fine_oracle():
    L = 2.7
    steer = math.atan(0.1 * L / 10.0)  # heading rate 0.1 rad/s at 10 m/s
    s0 = AgentState(0.0, 0.0, 0.0, 10.0)
    s1 = step_bicycle(s0, steer, 0.0, 0.2, L, 50).as_array()
    ref = euler_oracle(s0, steer, 0.0, 0.2, L)
    assert np.max(np.abs(s1[:2] - ref[:2])) < 1e-3
    assert s1[2] == pytest.approx(0.02, abs=1e-12)


def test_bicycle_rejects_nonfinite():
    with pytest.raises(ValueError):
        step_bicycle(AgentState(np.nan, 0, 0, 1), 0.0, 0.0, 0.2)


def test_wrap_angle_range():
    for a in np.linspace(-10, 10, 101):
        w = wrap_angle(a)
        assert -math.pi <= w < math.pi
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)


def test_step_joint_examples():
    z = np.zeros(4)
    assert np.array_equal(step_joint(z, np.zeros(2), np.zeros(2), 0.2), z)
    x = step_joint([0, 5, 0, 0], [0, 0], [0, 0], 0.2)
    assert x[0] == pytest.approx(1.0)
    x = step_joint([0, 0, 0, 0], [0, 2], [0, 0], 0.2)
    assert x[1] == pytest.approx(-0.4)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=16, max_size=16), st.floats(-3, 3), st.floats(-3, 3))
def test_step_joint_superposition(vals, a, b):
    v = np.array(vals)
    x1, x2, u1, u2, h1, h2 = v[:4], v[4:8], v[8:10], v[10:12], v[12:14], v[14:16]
    f = lambda x, u, h: step_joint(x, u, h, 0.2)
    lhs = f(a * x1 + b * x2, a * u1 + b * u2, a * h1 + b * h2)
    f0 = f(np.zeros(4), np.zeros(2), np.zeros(2))
    rhs = a * (f(x1, u1, h1) - f0) + b * (f(x2, u2, h2) - f0) + f0
    assert np.allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(v).max()) * (abs(a) + abs(b) + 1))


def test_assemble_examples():
    r = AgentState(0.0, 0.0, 0.0, 30.0)
    h = AgentState(10.0, 0.0, 0.0, 25.0)
    x = assemble_joint(r, h)
    assert x[0] == 10.0 and x[1] == -5.0
    assert np.array_equal(assemble_joint(r, r), [0.0, 0.0, 0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(finite, finite, finite, finite, st.floats(0, 40), st.floats(0, 40))
def test_assemble_split_roundtrip(xr, yr, xh, yh, vr, vh):
    r = AgentState(xr, yr, 0.0, vr)
    h = AgentState(xh, yh, 0.0, vh)
    x = assemble_joint(r, h)
    r2, h2 = split_joint(x, r)
    assert r2.y == r.y and h2.y == h.y
    assert h2.x == pytest.approx(h.x, abs=1e-9)
    assert h2.speed == pytest.approx(h.speed, abs=1e-9)
    assert np.allclose(assemble_joint(r2, h2), x, atol=1e-9)


def test_linearize_exact_for_planning_model(rng):
    for _ in range(20):
        x, uR, uH = rng.normal(size=4), rng.normal(size=2), rng.normal(size=2)
        lin = linearize(x, uR, uH, 0.2)
        dx, du, dh = rng.normal(size=4), rng.normal(size=2), rng.normal(size=2)
        nominal = step_joint(x, uR, uH, 0.2)
        assert np.allclose(step_joint(x + dx, uR + du, uH + dh, 0.2),
                           nominal + lin.predict(dx, du, dh), atol=1e-12)
        assert np.array_equal(lin.predict(np.zeros(4), np.zeros(2), np.zeros(2)), np.zeros(4))


def test_bicycle_jacobians_match_finite_differences(rng):
    worst = 0.0
    for _ in range(100):
        s = AgentState(rng.uniform(-50, 50), rng.uniform(-4, 4), rng.uniform(-0.3, 0.3), rng.uniform(1, 35))
        steer, accel = rng.uniform(-0.3, 0.3), rng.uniform(-5, 3)
        J, G = bicycle_jacobians(s, steer, accel, 0.2)
        Jf, Gf = fd_bicycle_jacobians(s, steer, accel, 0.2)
        for a, b in ((J, Jf), (G, Gf)):
            worst = max(worst, np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))
    assert worst <= 1e-6


def test_bicycle_linearization_is_second_order(rng):
    s = AgentState(0.0, 0.5, 0.05, 25.0)
    steer, accel = 0.05, 1.0
    J, G = bicycle_jacobians(s, steer, accel, 0.2)
    f0 = step_bicycle(s, steer, accel, 0.2).as_array()
    d = rng.normal(size=6)
    res = []
    for scale in (1e-2, 5e-3):
        dx, du = scale * d[:4], scale * d[4:]
        f = step_bicycle(AgentState.from_array(s.as_array() + dx), steer + du[0], accel + du[1], 0.2).as_array()
        res.append(np.linalg.norm(f - f0 - J @ dx - G @ du))
    assert 3.0 < res[0] / res[1] < 5.0


def test_control_box_lattice():
    box = robot_box(DynamicsConfig())
    lat = box.lattice(3)
    assert lat.shape == (9, 2)
    assert any(np.array_equal(u, [0.0, 0.0]) for u in lat)
    assert all(box.contains(u) for u in lat)
    assert np.array_equal(box.clip([5.0, -9.0]), [2.0, -5.0])


def test_step_agent_tracks_lateral_command():
    cfg = DynamicsConfig()
    s = AgentState(0.0, 0.0, 0.0, 30.0)
    for _ in range(10):
        s = step_agent(s, [1.0, 0.0], cfg)
    # after the heading transient the lateral speed settles at the command
    s2 = step_agent(s, [1.0, 0.0], cfg)
    assert (s2.y - s.y) / cfg.dt == pytest.approx(1.0, abs=0.05)
    assert s2.speed == pytest.approx(30.0, abs=1e-9)


def test_joint_matrices_shapes():
    A, BR, BH = joint_matrices(0.2)
    assert A.shape == (4, 4) and BR.shape == (4, 2) and BH.shape == (4, 2)
