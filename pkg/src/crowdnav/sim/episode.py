"""Episode loop, predictors for the benchmark, and JSONL traces."""
from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from crowdnav.core import RobotAction, SystemState, WeightVector
from crowdnav.prediction.baselines import cvg_predict, cvmm_predict, mixture_predict, symmetric_modes
from crowdnav.prediction.external import ExternalPredictor, PredictionProtocolError, StaleSamplesError
from crowdnav.prediction.samples import HistoryWindow, SampleSet
from crowdnav.sim.scenario import ScenarioConfig
from crowdnav.sim.world import World, robot_collides, step_world

GOAL_TOLERANCE = 0.3
FREEZE_SPEED = 0.05
HISTORY_LENGTH = 8
PREDICTORS = ("cvg", "cvmm", "mixture", "external")


class Predictor:
    """Maps a history window to a :class:`SampleSet` over the planning horizon."""

    def __init__(self, kind: str, horizon: int, dt: float, num_samples: int = 9, *,
                 seed: int = 0, endpoint: Optional[str] = None, noise_scale: float = 0.05,
                 modes=None):
        if kind not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}")
        if kind == "external" and not endpoint:
            raise ValueError("the external predictor needs an endpoint")
        self.kind = kind
        self.horizon = horizon
        self.dt = dt
        self.num_samples = num_samples
        self.seed = seed
        self.noise_scale = noise_scale
        self.modes = symmetric_modes() if modes is None else modes
        self._client = ExternalPredictor(endpoint) if kind == "external" else None
        self._calls = 0

    def reset(self, seed: Optional[int] = None):
        if seed is not None:
            self.seed = seed
        self._calls = 0

    def close(self):
        if self._client is not None:
            self._client.close()

    def __call__(self, history: HistoryWindow, stamp: float = 0.0) -> SampleSet:
        self._calls += 1
        if self.kind == "cvg":
            return cvg_predict(history, self.horizon, self.num_samples, dt=self.dt, stamp=stamp)
        if self.kind == "cvmm":
            return cvmm_predict(history, self.horizon, self.num_samples, dt=self.dt, stamp=stamp)
        if self.kind == "mixture":
            rng = np.random.default_rng([self.seed, self._calls])
            return mixture_predict(history, self.horizon, self.num_samples, self.modes,
                                   self.noise_scale, rng=rng, dt=self.dt, stamp=stamp)
        return self._client.predict(history, self.horizon, self.num_samples, stamp)


@dataclass
class EpisodeResult:
    seed: int
    success: bool
    nav_time: Optional[float]
    collision_steps: int
    frozen_steps: int
    total_steps: int
    dt: float
    timeout: float
    trace: list = field(default_factory=list, repr=False)
    # wall-clock control-step durations; excluded from equality so results stay comparable
    step_times: list = field(default_factory=list, repr=False, compare=False)

    def summary(self) -> dict:
        return {"seed": self.seed, "success": self.success, "nav_time": self.nav_time,
                "collision_steps": self.collision_steps, "frozen_steps": self.frozen_steps,
                "total_steps": self.total_steps, "dt": self.dt, "timeout": self.timeout}


def _history(buffers, robot_buf, dt) -> HistoryWindow:
    return HistoryWindow(tuple(np.array(b) for b in buffers), np.array(robot_buf), dt=dt)


def _measured(world: World, num_samples: int) -> SystemState:
    return SystemState(world.robot, world.humans, WeightVector.uniform(num_samples))


def run_episode(scenario: ScenarioConfig, controller, predictor: Callable, *, dt: float = 0.25,
                trace_path: Optional[Path] = None) -> EpisodeResult:
    """Run one closed-loop episode.

    ``controller`` needs ``reset()`` and ``step(measured, samples)`` returning an
    object with ``action``, ``status`` and ``fallback``; ``predictor`` maps a
    :class:`HistoryWindow` to a :class:`SampleSet`.
    """
    world = World.from_scenario(scenario)
    controller.reset()
    if hasattr(predictor, "reset"):
        predictor.reset()
    buffers = [deque([(0.0, *h.position)], maxlen=HISTORY_LENGTH) for h in world.humans]
    robot_buf = deque([(0.0, *world.robot.position, world.robot.heading)], maxlen=HISTORY_LENGTH)
    goal = np.asarray(scenario.robot_goal, float)
    max_steps = int(round(scenario.timeout / dt))
    samples: Optional[SampleSet] = None
    trace: list = []
    step_times: list = []
    collisions = frozen = 0
    success = False
    nav_time = None
    steps = 0
    for steps in range(1, max_steps + 1):
        history = _history(buffers, robot_buf, dt)
        try:
            samples = predictor(history, world.time)
        except (StaleSamplesError, PredictionProtocolError):
            if samples is None:
                raise
            samples = samples.as_stale()
        t0 = time.perf_counter()
        bundle = controller.step(_measured(world, samples.num_samples), samples)
        step_times.append(time.perf_counter() - t0)
        action: RobotAction = bundle.action
        world = step_world(world, action, dt)
        for b, h in zip(buffers, world.humans):
            b.append((world.time, *h.position))
        robot_buf.append((world.time, *world.robot.position, world.robot.heading))
        dist = float(np.linalg.norm(world.robot.position - goal))
        collided = robot_collides(world)
        is_frozen = abs(world.robot.speed) < FREEZE_SPEED and dist > GOAL_TOLERANCE
        collisions += collided
        frozen += is_frozen
        reached = dist <= GOAL_TOLERANCE
        trace.append({
            "step": steps, "time": round(world.time, 10),
            "robot": world.robot.as_array().tolist(),
            "humans": [[*h.position.tolist(), *h.velocity.tolist()] for h in world.humans],
            "action": [action.linear_velocity, action.angular_velocity],
            "status": bundle.status, "fallback": bool(bundle.fallback),
            "collision": bool(collided), "frozen": bool(is_frozen), "reached_goal": bool(reached),
        })
        if reached:
            success = True
            nav_time = world.time
            break
    result = EpisodeResult(scenario.seed, success, nav_time, collisions, frozen, steps, dt,
                           scenario.timeout, trace, step_times)
    if trace_path is not None:
        write_trace(trace, trace_path)
    return result


def write_trace(trace: list, path) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")


class TraceFormatError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


_TRACE_KEYS = ("step", "time", "robot", "humans", "action", "collision", "frozen", "reached_goal")


def read_trace(path) -> list:
    """Parse a JSONL trace, raising :class:`TraceFormatError` with the offending line number."""
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(i, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TraceFormatError(i, "record is not an object")
            missing = [k for k in _TRACE_KEYS if k not in rec]
            if missing:
                raise TraceFormatError(i, f"missing keys {missing}")
            if len(rec["robot"]) != 4 or any(len(h) != 4 for h in rec["humans"]):
                raise TraceFormatError(i, "robot or human state has the wrong length")
            out.append(rec)
    return out


def result_from_trace(trace: list, seed: int, dt: float, timeout: float) -> EpisodeResult:
    """Rebuild the counters of an :class:`EpisodeResult` from its trace."""
    success = bool(trace) and bool(trace[-1]["reached_goal"])
    return EpisodeResult(seed, success, trace[-1]["time"] if success else None,
                         sum(bool(r["collision"]) for r in trace), sum(bool(r["frozen"]) for r in trace),
                         len(trace), dt, timeout, list(trace))
