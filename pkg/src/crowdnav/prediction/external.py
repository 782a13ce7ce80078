"""Newline-delimited JSON bridge to an out-of-process trajectory predictor.

Request line::

    {"dt": 0.25, "horizon": 8, "num_samples": 9,
     "agents": [{"id": 0, "history": [[t, x, y], ...]}, ...],
     "robot_history": [[t, x, y, theta], ...]}

Response line::

    {"samples": [[[[x, y], ... T], ... N], ... S]}

Endpoints are ``tcp://host:port`` or ``exec:<shell command>`` (the command
speaks the protocol on stdin/stdout).
"""
from __future__ import annotations

import json
import selectors
import shlex
import socket
import subprocess
import time
from typing import Callable, TextIO

import numpy as np

from crowdnav.prediction.samples import HistoryWindow, SampleSet

DEFAULT_TIMEOUT = 0.080
# first reply after connecting or spawning; covers interpreter and model start-up
DEFAULT_STARTUP_TIMEOUT = 10.0


class PredictionProtocolError(ValueError):
    """The external predictor answered with a malformed or wrongly shaped response."""


class StaleSamplesError(TimeoutError):
    """No response arrived within the deadline; the caller should reuse its last sample set."""


def encode_request(history: HistoryWindow, horizon: int, num_samples: int) -> dict:
    return {
        "dt": history.dt,
        "horizon": int(horizon),
        "num_samples": int(num_samples),
        "agents": [{"id": aid, "history": hist.tolist()}
                   for aid, hist in zip(history.ids, history.agents)],
        "robot_history": history.robot.tolist(),
    }


def decode_request(obj: dict) -> tuple[HistoryWindow, int, int]:
    try:
        agents = obj["agents"]
        history = HistoryWindow(
            agents=tuple(np.array(a["history"], dtype=float).reshape(-1, 3) for a in agents),
            robot=np.array(obj.get("robot_history", []), dtype=float).reshape(-1, 4),
            ids=tuple(a["id"] for a in agents),
            dt=float(obj["dt"]),
        )
        return history, int(obj["horizon"]), int(obj["num_samples"])
    except (KeyError, TypeError, ValueError) as exc:
        raise PredictionProtocolError(f"bad request: {exc}") from exc


def decode_response(obj, num_samples: int, num_humans: int, horizon: int, dt: float,
                    stamp: float = 0.0) -> SampleSet:
    if not isinstance(obj, dict) or "samples" not in obj:
        raise PredictionProtocolError("response has no 'samples' field")
    try:
        arr = np.array(obj["samples"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise PredictionProtocolError(f"samples are not numeric: {exc}") from exc
    expected = (num_samples, num_humans, horizon, 2)
    if arr.shape != expected:
        raise PredictionProtocolError(f"samples have shape {arr.shape}, expected {expected}")
    if not np.all(np.isfinite(arr)):
        raise PredictionProtocolError("samples contain non-finite values")
    return SampleSet(arr, dt, stamp)


def _parse_line(line: str):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise PredictionProtocolError(f"response is not JSON: {exc}") from exc


class ExternalPredictor:
    """Client for one endpoint. Reconnects after a timeout so late replies are never misread."""

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT,
                 startup_timeout: float = DEFAULT_STARTUP_TIMEOUT):
        self.endpoint = endpoint
        self.timeout = timeout
        self.startup_timeout = startup_timeout
        self._sock: socket.socket | None = None
        self._sock_buf = b""
        self._proc: subprocess.Popen | None = None
        self._proc_buf = b""

    # -- transports -------------------------------------------------------
    def _tcp_roundtrip(self, payload: bytes, deadline: float) -> str:
        host, port = self.endpoint[len("tcp://"):].rsplit(":", 1)
        if self._sock is None:
            self._sock = socket.create_connection((host, int(port)),
                                                  timeout=max(deadline - time.monotonic(), 1e-3))
            self._sock_buf = b""
        self._sock.sendall(payload)
        while b"\n" not in self._sock_buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout()
            self._sock.settimeout(remaining)
            chunk = self._sock.recv(65536)
            if not chunk:
                raise PredictionProtocolError("predictor closed the connection")
            self._sock_buf += chunk
        line, self._sock_buf = self._sock_buf.split(b"\n", 1)
        return line.decode()

    def _exec_roundtrip(self, payload: bytes, deadline: float) -> str:
        if self._proc is None or self._proc.poll() is not None:
            cmd = shlex.split(self.endpoint[len("exec:"):])
            self._proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            self._proc_buf = b""
        self._proc.stdin.write(payload)
        self._proc.stdin.flush()
        sel = selectors.DefaultSelector()
        sel.register(self._proc.stdout, selectors.EVENT_READ)
        try:
            while b"\n" not in self._proc_buf:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not sel.select(remaining):
                    raise socket.timeout()
                chunk = self._proc.stdout.read1(65536)
                if not chunk:
                    raise PredictionProtocolError("predictor process exited")
                self._proc_buf += chunk
        finally:
            sel.close()
        line, self._proc_buf = self._proc_buf.split(b"\n", 1)
        return line.decode()

    def _reset(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def close(self):
        self._reset()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def predict(self, history: HistoryWindow, horizon: int, num_samples: int,
                stamp: float = 0.0) -> SampleSet:
        payload = (json.dumps(encode_request(history, horizon, num_samples)) + "\n").encode()
        fresh = self._sock is None and (self._proc is None or self._proc.poll() is not None)
        budget = max(self.timeout, self.startup_timeout) if fresh else self.timeout
        deadline = time.monotonic() + budget
        try:
            if self.endpoint.startswith("tcp://"):
                line = self._tcp_roundtrip(payload, deadline)
            elif self.endpoint.startswith("exec:"):
                line = self._exec_roundtrip(payload, deadline)
            else:
                raise ValueError(f"unsupported endpoint {self.endpoint!r}")
        except (socket.timeout, TimeoutError) as exc:
            self._reset()
            raise StaleSamplesError(f"no prediction within {budget * 1e3:.0f} ms") from exc
        except OSError as exc:
            self._reset()
            raise StaleSamplesError(f"predictor unreachable: {exc}") from exc
        return decode_response(_parse_line(line), num_samples, history.num_humans, horizon,
                               history.dt, stamp)


def external_predict(history: HistoryWindow, horizon: int, num_samples: int, endpoint: str,
                     timeout: float = DEFAULT_TIMEOUT) -> SampleSet:
    """One-shot request; use :class:`ExternalPredictor` to keep the connection open."""
    with ExternalPredictor(endpoint, timeout) as client:
        return client.predict(history, horizon, num_samples)


def serve_lines(predict_fn: Callable[[HistoryWindow, int, int], SampleSet],
                rfile: TextIO, wfile: TextIO) -> None:
    """Answer protocol requests from ``rfile`` until EOF. Used by stubs and adapters."""
    for line in rfile:
        if not line.strip():
            continue
        history, horizon, num_samples = decode_request(json.loads(line))
        samples = predict_fn(history, horizon, num_samples)
        wfile.write(json.dumps({"samples": samples.positions.tolist()}) + "\n")
        wfile.flush()
