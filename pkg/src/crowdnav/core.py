"""Domain types, agent dynamics and small geometric helpers.

All value types are frozen dataclasses holding read-only numpy arrays, so they
can be shared between threads without copying.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InvalidStateError(ValueError):
    """Raised when a state or action contains non-finite values."""


def _vec2(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (2,):
        raise InvalidStateError(f"{name} must be a 2-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidStateError(f"{name} is not finite: {arr}")
    arr.setflags(write=False)
    return arr


def _finite(value, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidStateError(f"{name} is not finite: {value}")
    return value


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class RobotState:
    position: np.ndarray
    heading: float = 0.0
    speed: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", _vec2(self.position, "robot position"))
        object.__setattr__(self, "heading", wrap_angle(_finite(self.heading, "heading")))
        object.__setattr__(self, "speed", _finite(self.speed, "speed"))

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])

    def as_array(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.heading, self.speed])


@dataclass(frozen=True)
class RobotAction:
    linear_velocity: float = 0.0
    angular_velocity: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "linear_velocity", _finite(self.linear_velocity, "linear velocity"))
        object.__setattr__(self, "angular_velocity", _finite(self.angular_velocity, "angular velocity"))

    def as_array(self) -> np.ndarray:
        return np.array([self.linear_velocity, self.angular_velocity])


@dataclass(frozen=True)
class HumanState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "position", _vec2(self.position, "human position"))
        object.__setattr__(self, "velocity", _vec2(self.velocity, "human velocity"))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class WeightVector:
    """Importance weights over joint prediction samples, kept on the simplex."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise InvalidStateError("weight vector is empty")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise InvalidStateError(f"weights must be finite and non-negative: {w}")
        total = w.sum()
        if total <= 0.0:
            raise InvalidStateError("weights sum to zero")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, num_samples: int) -> "WeightVector":
        return cls(np.full(num_samples, 1.0 / num_samples))

    def __len__(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class SystemState:
    robot: RobotState
    humans: tuple[HumanState, ...]
    weights: WeightVector

    def __post_init__(self):
        object.__setattr__(self, "humans", tuple(self.humans))

    @property
    def num_humans(self) -> int:
        return len(self.humans)


@dataclass(frozen=True)
class Segment:
    endpoint_a: np.ndarray
    endpoint_b: np.ndarray

    def __post_init__(self):
        a = _vec2(self.endpoint_a, "segment endpoint")
        b = _vec2(self.endpoint_b, "segment endpoint")
        if np.allclose(a, b, rtol=0.0, atol=1e-12):
            raise InvalidStateError("segment endpoints coincide")
        object.__setattr__(self, "endpoint_a", a)
        object.__setattr__(self, "endpoint_b", b)


@dataclass(frozen=True)
class ActuationLimits:
    action_min: RobotAction = RobotAction(0.0, -1.5)
    action_max: RobotAction = RobotAction(1.0, 1.5)
    rate_min: RobotAction = RobotAction(-0.25, -0.75)
    rate_max: RobotAction = RobotAction(0.25, 0.75)

    def __post_init__(self):
        if np.any(self.action_min.as_array() > self.action_max.as_array()):
            raise ValueError("action_min exceeds action_max")
        if np.any(self.rate_min.as_array() > self.rate_max.as_array()):
            raise ValueError("rate_min exceeds rate_max")

    @property
    def lower(self) -> np.ndarray:
        return self.action_min.as_array()

    @property
    def upper(self) -> np.ndarray:
        return self.action_max.as_array()

    @property
    def rate_lower(self) -> np.ndarray:
        return self.rate_min.as_array()

    @property
    def rate_upper(self) -> np.ndarray:
        return self.rate_max.as_array()


def unicycle_step(state: RobotState, action: RobotAction, dt: float) -> RobotState:
    """Forward-Euler kinematic unicycle update; speed becomes the commanded velocity."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    v, omega = action.linear_velocity, action.angular_velocity
    c, s = math.cos(state.heading), math.sin(state.heading)
    return RobotState(
        position=(state.position[0] + dt * v * c, state.position[1] + dt * v * s),
        heading=state.heading + dt * omega,
        speed=v,
    )


def integrator_step(state: HumanState, velocity, dt: float) -> HumanState:
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    velocity = _vec2(velocity, "human velocity")
    return HumanState(position=state.position + dt * velocity, velocity=velocity)


def position_of(state: SystemState, agent_index: int) -> np.ndarray:
    """Position of agent ``agent_index`` (0 is the robot, 1..N the humans)."""
    if agent_index == 0:
        return state.robot.position
    if 1 <= agent_index <= state.num_humans:
        return state.humans[agent_index - 1].position
    raise IndexError(f"agent index {agent_index} out of range for {state.num_humans} humans")


def closest_point_on_segment(point, a, b) -> tuple[np.ndarray, float]:
    """Closest point on segment ab and its parameter in [0, 1]."""
    point = np.asarray(point, dtype=float)
    ab = b - a
    t = float(np.dot(point - a, ab) / np.dot(ab, ab))
    t = min(1.0, max(0.0, t))
    return a + t * ab, t


def point_segment_distance(point, segment: Segment) -> float:
    q, _ = closest_point_on_segment(point, segment.endpoint_a, segment.endpoint_b)
    return float(np.linalg.norm(np.asarray(point, dtype=float) - q))


def segments_from_arrays(segments: Sequence) -> tuple[Segment, ...]:
    return tuple(s if isinstance(s, Segment) else Segment(s[0], s[1]) for s in segments)
