import io
import json
import math
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdnav.prediction import (
    HistoryWindow,
    SampleSet,
    TrajectorySample,
    cvg_predict,
    cvmm_predict,
    kde_init_weights,
    mixture_predict,
)
from crowdnav.prediction.baselines import mode_labels
from crowdnav.prediction.external import (
    ExternalPredictor,
    PredictionProtocolError,
    StaleSamplesError,
    decode_request,
    decode_response,
    encode_request,
    serve_lines,
)
from oracles import loo_kde_weights

STUB = f"exec:{sys.executable} -m crowdnav.prediction.stub"


def _moving(p0, v, dt=0.25, points=2):
    t = dt * np.arange(points)
    return np.column_stack([t, p0[0] + v[0] * (t - t[-1]), p0[1] + v[1] * (t - t[-1])])


def _history(*agents, dt=0.25):
    return HistoryWindow(agents=tuple(agents), dt=dt)


# sample containers

def test_sample_set_shapes_and_validation():
    ss = SampleSet(np.zeros((3, 2, 4, 2)), 0.25)
    assert (ss.num_samples, ss.num_humans, ss.horizon) == (3, 2, 4)
    assert ss.at_step(1).shape == (3, 2, 2)
    with pytest.raises(ValueError):
        SampleSet(np.zeros((3, 2, 4)), 0.25)
    with pytest.raises(ValueError):
        SampleSet(np.full((1, 1, 1, 2), np.nan), 0.25)
    with pytest.raises(ValueError):
        TrajectorySample(np.zeros((0, 3, 2)))


def test_from_samples_requires_common_shape():
    with pytest.raises(ValueError):
        SampleSet.from_samples([TrajectorySample(np.zeros((1, 2, 2))),
                                TrajectorySample(np.zeros((1, 3, 2)))], 0.25)


def test_history_rejects_unordered_timestamps():
    with pytest.raises(ValueError):
        HistoryWindow(agents=(np.array([[0.0, 0, 0], [0.0, 1, 1]]),))


# constant-velocity baselines

@pytest.mark.parametrize("predict", [cvg_predict, cvmm_predict])
def test_constant_velocity_rollout(predict):
    ss = predict(_history(_moving([0.0, 0.0], [1.0, 0.0])), 8, 3, dt=0.25)
    k = np.arange(1, 9)
    expected = np.column_stack([0.25 * k, np.zeros(8)])
    assert ss.positions.shape == (3, 1, 8, 2)
    for s in range(3):
        np.testing.assert_allclose(ss.positions[s, 0], expected, atol=1e-12)


@pytest.mark.parametrize("predict", [cvg_predict, cvmm_predict])
def test_stationary_human_stays_put(predict):
    ss = predict(_history(_moving([2.0, -1.0], [0.0, 0.0], points=5)), 6, 1)
    np.testing.assert_array_equal(ss.positions[0, 0], np.tile([2.0, -1.0], (6, 1)))


@pytest.mark.parametrize("predict", [cvg_predict, cvmm_predict])
def test_noisy_history_uses_last_difference(predict, rng):
    hist = np.column_stack([0.25 * np.arange(6), rng.normal(size=(6, 2))])
    ss = predict(_history(hist), 3, 1, dt=0.25)
    v = (hist[-1, 1:] - hist[-2, 1:]) / 0.25
    np.testing.assert_allclose(ss.positions[0, 0, 0], hist[-1, 1:] + 0.25 * v, atol=1e-12)


def test_single_point_history_predicts_zero_velocity():
    ss = cvg_predict(_history(np.array([[0.0, 1.0, 1.0]])), 4, 1)
    np.testing.assert_array_equal(ss.positions[0, 0], np.ones((4, 2)))


# mixture

def test_single_mode_without_noise_matches_cvg():
    h = _history(_moving([0, 0], [1.0, 0.5]), _moving([3, 1], [-0.3, 0.0]))
    mix = mixture_predict(h, 8, 4, [(0.0, 1.0)], 0.0, rng=3)
    cv = cvg_predict(h, 8, 4)
    np.testing.assert_allclose(mix.positions, cv.positions, atol=1e-12)


def test_two_mode_frequencies():
    h = _history(_moving([0, 0], [1.0, 0.0]))
    modes = [(math.radians(30), 0.5), (-math.radians(30), 0.5)]
    ss = mixture_predict(h, 8, 1000, modes, 0.0, rng=11)
    left = np.mean(ss.positions[:, 0, -1, 1] > 0.0)
    assert abs(left - 0.5) <= 0.05
    labels = mode_labels(1000, 1, modes, 11)
    np.testing.assert_array_equal(labels[:, 0] == 0, ss.positions[:, 0, -1, 1] > 0.0)


def test_zero_probability_mode_never_drawn():
    h = _history(_moving([0, 0], [1.0, 0.0]))
    ss = mixture_predict(h, 8, 400, [(0.0, 1.0), (math.radians(60), 0.0)], 0.0, rng=5)
    np.testing.assert_allclose(ss.positions[:, 0, :, 1], 0.0, atol=1e-12)


def test_mixture_rejects_bad_modes():
    h = _history(_moving([0, 0], [1.0, 0.0]))
    with pytest.raises(ValueError):
        mixture_predict(h, 4, 3, [], 0.0)
    with pytest.raises(ValueError):
        mixture_predict(h, 4, 3, [(0.0, 0.6), (1.0, 0.6)], 0.0)


def test_mixture_is_deterministic_for_a_seed():
    h = _history(_moving([0, 0], [1.0, 0.0]))
    a = mixture_predict(h, 8, 9, [(0.0, 1.0)], 0.0, rng=42)
    b = mixture_predict(h, 8, 9, [(0.0, 1.0)], 0.0, rng=42)
    assert a.positions.tobytes() == b.positions.tobytes()


def test_mixture_noise_grows_with_time():
    h = _history(_moving([0, 0], [1.0, 0.0]))
    ss = mixture_predict(h, 8, 4000, [(0.0, 1.0)], 0.2, rng=1)
    sd = ss.positions[:, 0, :, 1].std(axis=0)
    expected = 0.2 * np.sqrt(0.25 * np.arange(1, 9))
    np.testing.assert_allclose(sd, expected, rtol=0.06)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1),
       st.floats(0.0, 0.5))
def test_producers_return_finite_consistent_shapes(n, T, S, seed, noise):
    rng = np.random.default_rng(seed)
    h = _history(*[_moving(rng.normal(size=2), rng.normal(size=2), points=3) for _ in range(n)])
    for ss in (cvg_predict(h, T, S), cvmm_predict(h, T, S),
               mixture_predict(h, T, S, [(0.0, 0.5), (0.4, 0.5)], noise, rng=seed)):
        assert ss.positions.shape == (S, n, T, 2)
        assert np.all(np.isfinite(ss.positions))


# KDE

def _sample_set(points, n=1, T=None):
    s = points.shape[0]
    T = T or points.shape[1] // (2 * n)
    return SampleSet(points.reshape(s, n, T, 2), 0.25)


def test_identical_samples_get_uniform_weights():
    ss = SampleSet(np.ones((5, 2, 3, 2)), 0.25)
    np.testing.assert_allclose(kde_init_weights(ss).weights, np.full(5, 0.2))


def test_outlier_gets_least_weight():
    pts = np.array([[0.0, 0.0, 0.1, 0.0], [0.0, 0.0, 0.1, 0.0], [3.0, 2.0, 3.0, 1.0]])
    pts[1] += 1e-3
    w = kde_init_weights(_sample_set(pts)).weights
    assert w[0] > w[2] and w[1] > w[2]


def test_kde_matches_double_loop_oracle(rng):
    pts = rng.normal(size=(50, 8))
    w = kde_init_weights(_sample_set(pts, n=2, T=2)).weights
    np.testing.assert_allclose(w, loo_kde_weights(pts), atol=1e-9, rtol=0)


def test_single_sample_is_uniform():
    assert kde_init_weights(SampleSet(np.zeros((1, 1, 2, 2)), 0.25)).weights.tolist() == [1.0]


def test_unknown_bandwidth_rule():
    with pytest.raises(ValueError):
        kde_init_weights(SampleSet(np.zeros((2, 1, 2, 2)), 0.25), "silverman")


@given(st.integers(0, 2**31 - 1), st.integers(3, 12))
def test_kde_simplex_and_permutation_equivariance(seed, s):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(s, 4))
    perm = rng.permutation(s)
    w = kde_init_weights(_sample_set(pts)).weights
    wp = kde_init_weights(_sample_set(pts[perm])).weights
    assert np.all(w >= 0.0) and abs(w.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(wp, w[perm], atol=1e-12)


# wire protocol

def test_request_round_trip():
    h = HistoryWindow(agents=(_moving([0, 0], [1, 0]), _moving([1, 1], [0, 1])),
                      robot=np.array([[0.0, 5.0, 5.0, 0.1]]), ids=(7, 9))
    back, T, S = decode_request(json.loads(json.dumps(encode_request(h, 8, 9))))
    assert (T, S, back.ids) == (8, 9, (7, 9))
    for a, b in zip(back.agents, h.agents):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.robot, h.robot)


def test_decode_request_rejects_garbage():
    with pytest.raises(PredictionProtocolError):
        decode_request({"agents": []})


@pytest.mark.parametrize("payload", [
    {},
    {"samples": "nope"},
    {"samples": np.zeros((2, 1, 3, 2)).tolist()},
    {"samples": np.full((1, 1, 3, 2), np.nan).tolist()},
])
def test_decode_response_protocol_errors(payload):
    with pytest.raises(PredictionProtocolError):
        decode_response(json.loads(json.dumps(payload)), 1, 1, 3, 0.25)


def test_serve_lines_answers_each_request():
    h = _history(_moving([0, 0], [1, 0]))
    req = json.dumps(encode_request(h, 4, 2)) + "\n"
    out = io.StringIO()
    serve_lines(lambda hist, T, S: cvg_predict(hist, T, S), io.StringIO(req + "\n" + req), out)
    lines = out.getvalue().splitlines()
    assert len(lines) == 2
    got = decode_response(json.loads(lines[0]), 2, 1, 4, 0.25)
    np.testing.assert_allclose(got.positions, cvg_predict(h, 4, 2).positions)


def test_loopback_stub_matches_cvg():
    h = _history(_moving([0, 0], [1, 0]), _moving([2, 1], [0, -0.5]))
    # the first call pays for interpreter start-up
    with ExternalPredictor(STUB, timeout=30.0) as client:
        client.predict(h, 8, 3)
        client.timeout = 2.0
        got = client.predict(h, 8, 3)
    np.testing.assert_allclose(got.positions, cvg_predict(h, 8, 3).positions, atol=1e-12)


def test_fresh_process_gets_startup_allowance():
    h = _history(_moving([0, 0], [1, 0]))
    # default 80 ms would not cover interpreter start-up without the allowance
    with ExternalPredictor(STUB) as client:
        got = client.predict(h, 4, 2)
    assert got.positions.shape == (2, 1, 4, 2)


def test_slow_startup_beyond_allowance_is_stale():
    h = _history(_moving([0, 0], [1, 0]))
    with ExternalPredictor(STUB + " --delay 1.0", timeout=0.05, startup_timeout=0.2) as client:
        with pytest.raises(StaleSamplesError):
            client.predict(h, 4, 1)


def test_nan_response_is_protocol_error(tmp_path):
    script = tmp_path / "nan_stub.py"
    script.write_text(
        "import sys, json\n"
        "for line in sys.stdin:\n"
        "    req = json.loads(line)\n"
        "    n, T, S = len(req['agents']), req['horizon'], req['num_samples']\n"
        "    sys.stdout.write(json.dumps({'samples': [[[[float('nan'), 0.0]] * T] * n] * S}) + '\\n')\n"
        "    sys.stdout.flush()\n"
    )
    with ExternalPredictor(f"exec:{sys.executable} {script}", timeout=30.0) as client:
        with pytest.raises(PredictionProtocolError):
            client.predict(_history(_moving([0, 0], [1, 0])), 4, 2)


def test_slow_stub_raises_stale_samples():
    h = _history(_moving([0, 0], [1, 0]))
    with ExternalPredictor(STUB + " --delay 0.2", timeout=30.0) as client:
        client.predict(h, 4, 1)
        client.timeout = 0.080
        with pytest.raises(StaleSamplesError):
            client.predict(h, 4, 1)


def test_tcp_loopback_matches_cvg():
    import socketserver
    import threading

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            rfile = io.TextIOWrapper(self.rfile, encoding="utf-8")
            wfile = io.TextIOWrapper(self.wfile, encoding="utf-8", write_through=True)
            serve_lines(lambda hist, T, S: cvg_predict(hist, T, S), rfile, wfile)

    with socketserver.ThreadingTCPServer(("127.0.0.1", 0), Handler) as server:
        server.daemon_threads = True
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        port = server.server_address[1]
        h = _history(_moving([0, 0], [0.5, 0.5]))
        with ExternalPredictor(f"tcp://127.0.0.1:{port}", timeout=5.0) as client:
            first = client.predict(h, 6, 2)
            second = client.predict(h, 6, 2)
        server.shutdown()
    np.testing.assert_allclose(first.positions, cvg_predict(h, 6, 2).positions, atol=1e-12)
    np.testing.assert_array_equal(first.positions, second.positions)


def test_unreachable_endpoint_is_stale():
    with pytest.raises(StaleSamplesError):
        ExternalPredictor("tcp://127.0.0.1:1", timeout=0.2).predict(
            _history(_moving([0, 0], [1, 0])), 4, 1)
