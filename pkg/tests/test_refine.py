import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from crowdnav.core import HumanState, WeightVector
from crowdnav.refine import (
    RefineConfig,
    intent_velocity,
    weight_update,
    weight_update_arrays,
    weight_update_jac,
    weighted_intent,
)
from oracles import weight_update_formula

NO_FLOOR = RefineConfig(sigma=0.25, weight_floor=0.0)


def _random_simplex(rng, s):
    w = rng.random(s) + 0.05
    return w / w.sum()


# weighted intent

def test_one_hot_weight_returns_that_sample(rng):
    y = rng.normal(size=(5, 3, 2))
    w = np.zeros(5)
    w[2] = 1.0
    np.testing.assert_array_equal(weighted_intent(y, WeightVector(w)), y[2])


def test_identical_samples_give_common_position():
    y = np.tile(np.array([[1.0, -2.0], [0.5, 0.25]]), (4, 1, 1))
    np.testing.assert_allclose(weighted_intent(y, WeightVector.uniform(4)), y[0], atol=1e-15)


def test_weighted_intent_matches_loop_sum(rng):
    y = rng.normal(size=(9, 4, 2))
    w = _random_simplex(rng, 9)
    expected = np.zeros((4, 2))
    for s in range(9):
        for j in range(4):
            expected[j] += w[s] * y[s, j]
    np.testing.assert_allclose(weighted_intent(y, WeightVector(w)), expected, atol=1e-12)


def test_weighted_intent_rejects_mismatch():
    with pytest.raises(ValueError):
        weighted_intent(np.zeros((3, 2, 2)), WeightVector.uniform(4))


# intent velocity

def test_intent_velocity_examples():
    h = HumanState(position=np.array([0.0, 0.0]), velocity=np.zeros(2))
    np.testing.assert_array_equal(intent_velocity(h, [0.0, 0.0], 0.25), [0.0, 0.0])
    np.testing.assert_allclose(intent_velocity(h, [0.25, 0.0], 0.25), [1.0, 0.0])


def test_intent_velocity_random_pairs(rng):
    for _ in range(20):
        p, q = rng.normal(size=2), rng.normal(size=2)
        dt = rng.uniform(0.05, 1.0)
        got = intent_velocity(p, q, dt)
        assert got[0] == pytest.approx((q[0] - p[0]) / dt, abs=1e-12)
        assert got[1] == pytest.approx((q[1] - p[1]) / dt, abs=1e-12)


def test_intent_velocity_rejects_bad_dt():
    with pytest.raises(ValueError):
        intent_velocity(np.zeros(2), np.ones(2), 0.0)


# weight update

def test_equidistant_samples_leave_weights_unchanged(rng):
    prev = _random_simplex(rng, 6)
    x = np.array([[1.0, 2.0]])
    ang = np.linspace(0, 2 * math.pi, 6, endpoint=False)
    y = (x + 0.7 * np.column_stack([np.cos(ang), np.sin(ang)]))[:, None, :]
    out = weight_update(WeightVector(prev), x, y, NO_FLOOR)
    np.testing.assert_allclose(out.weights, prev, atol=1e-12)


def test_coincident_sample_takes_almost_all_mass():
    x = np.array([[0.0, 0.0], [1.0, 1.0]])
    y = np.stack([x + 5.0, x, x - 5.0])
    out = weight_update(WeightVector.uniform(3), x, y, RefineConfig())
    assert out.weights[1] > 1.0 - 1e-5


def test_matches_formula_oracle(rng):
    for _ in range(25):
        s, n = 4, int(rng.integers(1, 4))
        prev = _random_simplex(rng, s)
        x = rng.normal(size=(n, 2))
        y = x[None] + 0.4 * rng.normal(size=(s, n, 2))
        sigma = rng.uniform(0.1, 1.0)
        got = weight_update(WeightVector(prev), x, y, RefineConfig(sigma=sigma, weight_floor=0.0))
        np.testing.assert_allclose(got.weights, weight_update_formula(prev, x, y, sigma),
                                   atol=1e-12, rtol=0)


def test_floor_keeps_modes_alive():
    x = np.zeros((1, 2))
    y = np.array([[[0.0, 0.0]], [[50.0, 0.0]]])
    out = weight_update(WeightVector.uniform(2), x, y, RefineConfig(sigma=0.25, weight_floor=1e-6))
    assert out.weights[1] >= 1e-6 / (1 + 1e-6) - 1e-15
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_underflow_without_floor_falls_back_to_likelihood():
    prev = np.array([1.0, 0.0])
    x = np.zeros((1, 2))
    y = np.array([[[1e3, 0.0]], [[0.0, 0.0]]])
    w = weight_update_arrays(prev, x, y, 0.25, 0.0)
    np.testing.assert_allclose(w, [0.0, 1.0], atol=1e-12)


def test_floor_must_be_below_one_over_s():
    with pytest.raises(ValueError):
        weight_update(WeightVector.uniform(4), np.zeros((1, 2)), np.zeros((4, 1, 2)),
                      RefineConfig(weight_floor=0.3))


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(sigma=0.0)
    with pytest.raises(ValueError):
        RefineConfig(weight_floor=-0.1)


def test_shape_mismatch_is_rejected():
    with pytest.raises(ValueError):
        weight_update(WeightVector.uniform(3), np.zeros((2, 2)), np.zeros((3, 1, 2)))


def test_jacobian_matches_finite_differences(rng):
    s, n = 5, 2
    prev = _random_simplex(rng, s)
    x = rng.normal(size=(n, 2))
    y = x[None] + 0.5 * rng.normal(size=(s, n, 2))
    for floor in (0.0, 1e-6):
        w, d_prev, d_x = weight_update_jac(prev, x, y, 0.3, floor)
        np.testing.assert_allclose(w, weight_update_arrays(prev, x, y, 0.3, floor), atol=1e-14)
        eps = 1e-6
        for k in range(s):
            e = np.zeros(s)
            e[k] = eps
            fd = (weight_update_arrays(prev + e, x, y, 0.3, floor)
                  - weight_update_arrays(prev - e, x, y, 0.3, floor)) / (2 * eps)
            np.testing.assert_allclose(d_prev[:, k], fd, atol=1e-7)
        flat = x.reshape(-1)
        for k in range(2 * n):
            e = np.zeros(2 * n)
            e[k] = eps
            fd = (weight_update_arrays(prev, (flat + e).reshape(n, 2), y, 0.3, floor)
                  - weight_update_arrays(prev, (flat - e).reshape(n, 2), y, 0.3, floor)) / (2 * eps)
            np.testing.assert_allclose(d_x[:, k], fd, atol=1e-7)


# properties

def _geometry(s, n):
    return st.tuples(
        arrays(float, (s,), elements=st.floats(0.01, 1.0)),
        arrays(float, (n, 2), elements=st.floats(-3, 3)),
        arrays(float, (s, n, 2), elements=st.floats(-3, 3)),
    )


@given(st.integers(2, 7).flatmap(lambda s: st.integers(1, 4).flatmap(lambda n: _geometry(s, n))),
       st.floats(0.05, 2.0))
def test_output_on_simplex(geom, sigma):
    prev, x, y = geom
    w = weight_update(WeightVector(prev), x, y, RefineConfig(sigma=sigma, weight_floor=1e-6)).weights
    assert np.all(w >= 0.0)
    assert abs(w.sum() - 1.0) <= 1e-9


@given(st.integers(2, 7).flatmap(lambda s: st.integers(1, 4).flatmap(lambda n: _geometry(s, n))),
       st.floats(0.05, 2.0))
def test_monotone_in_error_under_uniform_prior(geom, sigma):
    _, x, y = geom
    s = y.shape[0]
    w = weight_update(WeightVector.uniform(s), x, y, RefineConfig(sigma=sigma, weight_floor=0.0)).weights
    err = np.sum((y - x[None]) ** 2, axis=(1, 2))
    for a in range(s):
        for b in range(s):
            if err[a] < err[b]:
                assert w[a] >= w[b]


@given(st.integers(2, 7).flatmap(lambda s: st.integers(1, 4).flatmap(lambda n: _geometry(s, n))),
       st.floats(0.05, 2.0), st.floats(0.2, 5.0))
def test_sigma_scaling_keeps_argmax(geom, sigma, c):
    _, x, y = geom
    s = y.shape[0]
    err = np.sum((y - x[None]) ** 2, axis=(1, 2))
    # ties make the argmax ambiguous
    srt = np.sort(err)
    if srt[1] - srt[0] < 1e-6:
        return
    w1 = weight_update(WeightVector.uniform(s), x, y, RefineConfig(sigma=sigma, weight_floor=0.0))
    w2 = weight_update(WeightVector.uniform(s), x, y, RefineConfig(sigma=c * sigma, weight_floor=0.0))
    assert np.argmax(w1.weights) == np.argmax(w2.weights) == np.argmin(err)


@given(st.integers(2, 6).flatmap(lambda s: st.integers(1, 3).flatmap(
    lambda n: st.tuples(_geometry(s, n), arrays(float, (n, 2), elements=st.floats(-3, 3))))))
def test_two_updates_compose_into_one(data):
    (prev, xa, y), xb = data
    n = xa.shape[0]
    sigma = 0.5
    prev = prev / prev.sum()
    ab = weight_update_arrays(weight_update_arrays(prev, xa, y, sigma, 0.0), xb, y, sigma, 0.0)
    ba = weight_update_arrays(weight_update_arrays(prev, xb, y, sigma, 0.0), xa, y, sigma, 0.0)
    err = np.sum((y - xa[None]) ** 2, axis=(1, 2)) + np.sum((y - xb[None]) ** 2, axis=(1, 2))
    logit = np.log(prev) - err / (n * sigma)
    once = np.exp(logit - logit.max())
    once /= once.sum()
    np.testing.assert_allclose(ab, ba, atol=1e-9)
    np.testing.assert_allclose(ab, once, atol=1e-9)
