import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdnav.core import (ActuationLimits, HumanState, InvalidStateError, RobotAction, RobotState,
                           Segment, SystemState, WeightVector, integrator_step, point_segment_distance,
                           position_of, unicycle_step, wrap_angle)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
angles = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def test_unicycle_zero_action_is_fixed_point():
    s = unicycle_step(RobotState((0, 0), 0.0, 0.0), RobotAction(0, 0), 0.25)
    assert np.allclose(s.position, 0) and s.heading == 0 and s.speed == 0


def test_unicycle_axis_step():
    s = unicycle_step(RobotState((0, 0), 0.0), RobotAction(1.0, 0.0), 0.25)
    assert np.allclose(s.position, (0.25, 0.0))
    assert s.heading == 0.0
    assert s.speed == 1.0


def test_unicycle_rotated_step_matches_scalar_euler():
    th = math.pi / 2
    s = unicycle_step(RobotState((1, 1), th), RobotAction(0.8, 0.4), 0.25)
    x = 1 + 0.25 * 0.8 * math.cos(th)
    y = 1 + 0.25 * 0.8 * math.sin(th)
    assert s.position[0] == pytest.approx(x, abs=1e-15)
    assert s.position[1] == pytest.approx(y, abs=1e-15)
    assert s.heading == pytest.approx(th + 0.1)


@given(finite, finite, angles, finite, finite, st.floats(0.01, 1.0))
def test_unicycle_displacement_equals_speed_times_dt(x, y, th, v, w, dt):
    s0 = RobotState((x, y), th)
    s1 = unicycle_step(s0, RobotAction(v, w), dt)
    assert np.linalg.norm(s1.position - s0.position) == pytest.approx(abs(v) * dt, rel=1e-9, abs=1e-9)
    assert -math.pi < s1.heading <= math.pi


def test_unicycle_rejects_bad_input():
    with pytest.raises(InvalidStateError):
        RobotState((np.nan, 0.0))
    with pytest.raises(InvalidStateError):
        RobotAction(np.inf, 0.0)
    with pytest.raises(ValueError):
        unicycle_step(RobotState((0, 0)), RobotAction(), 0.0)


def test_integrator_examples():
    assert np.allclose(integrator_step(HumanState((0, 0)), (0, 0), 0.25).position, (0, 0))
    h = integrator_step(HumanState((2, -1)), (0.4, 0.8), 0.25)
    assert np.allclose(h.position, (2.1, -0.8))
    assert np.allclose(h.velocity, (0.4, 0.8))


@given(finite, finite, finite, finite, st.floats(0.01, 1.0))
def test_integrator_componentwise(x, y, vx, vy, dt):
    h = integrator_step(HumanState((x, y)), (vx, vy), dt)
    assert h.position[0] == x + dt * vx
    assert h.position[1] == y + dt * vy


def test_integrator_rejects_nonfinite_velocity():
    with pytest.raises(InvalidStateError):
        integrator_step(HumanState((0, 0)), (np.nan, 0), 0.25)


@given(angles)
def test_wrap_is_idempotent_and_in_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert wrap_angle(w) == w
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_wrap_boundary():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi


def _state(rng, n=3):
    robot = RobotState(rng.normal(size=2), rng.uniform(-3, 3), 0.5)
    humans = tuple(HumanState(rng.normal(size=2), rng.normal(size=2)) for _ in range(n))
    return SystemState(robot, humans, WeightVector.uniform(4))


def test_position_of(rng):
    s = _state(rng)
    assert position_of(s, 0) is s.robot.position
    assert np.array_equal(position_of(s, 2), s.humans[1].position)
    with pytest.raises(IndexError):
        position_of(s, 4)
    with pytest.raises(IndexError):
        position_of(s, -1)


def test_position_of_matches_selector_quadratic_form(rng):
    for _ in range(20):
        s = _state(rng)
        x = np.concatenate([s.robot.position] + [h.position for h in s.humans])
        for j in range(1, 4):
            # selector difference P_0 - P_j on the stacked positions
            D = np.zeros((2, x.size))
            D[:, 0:2] = np.eye(2)
            D[:, 2 * j:2 * j + 2] = -np.eye(2)
            quad = x @ D.T @ D @ x
            assert np.linalg.norm(position_of(s, 0) - position_of(s, j)) ** 2 == pytest.approx(quad)


def test_point_segment_distance_examples():
    seg = Segment((-1, 0), (1, 0))
    assert point_segment_distance((0.3, 0.0), seg) == pytest.approx(0.0, abs=1e-15)
    assert point_segment_distance((0, 1), seg) == pytest.approx(1.0)
    assert point_segment_distance((3, 0), seg) == pytest.approx(2.0)


def test_point_segment_distance_dense_oracle(rng):
    ts = np.linspace(0.0, 1.0, 10001)
    for _ in range(50):
        a, b, p = rng.uniform(-3, 3, size=(3, 2))
        pts = a[None] + ts[:, None] * (b - a)[None]
        oracle = np.min(np.linalg.norm(pts - p, axis=1))
        got = point_segment_distance(p, Segment(a, b))
        # the grid can only overestimate, by at most half a grid step
        assert got <= oracle + 1e-12
        assert oracle - got <= np.linalg.norm(b - a) / 10000


def test_segment_rejects_coincident_endpoints():
    with pytest.raises(InvalidStateError):
        Segment((1, 1), (1, 1))


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=12).filter(lambda w: sum(w) > 1e-6))
def test_weight_vector_on_simplex(w):
    v = WeightVector(w)
    assert np.all(v.weights >= 0)
    assert abs(v.weights.sum() - 1.0) <= 1e-9


def test_weight_vector_rejects_invalid():
    for bad in ([], [-0.1, 1.1], [0.0, 0.0], [np.nan, 1.0]):
        with pytest.raises(InvalidStateError):
            WeightVector(bad)
    assert np.allclose(WeightVector.uniform(4).weights, 0.25)


def test_values_are_read_only():
    r = RobotState((1, 2))
    with pytest.raises(ValueError):
        r.position[0] = 5.0


def test_actuation_limits_validate():
    with pytest.raises(ValueError):
        ActuationLimits(action_min=RobotAction(2.0, 0.0), action_max=RobotAction(1.0, 0.0))
    lim = ActuationLimits()
    assert np.all(lim.lower <= lim.upper) and np.all(lim.rate_lower <= lim.rate_upper)
