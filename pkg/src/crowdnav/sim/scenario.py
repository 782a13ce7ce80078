"""Randomized corridor scenarios."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crowdnav.core import Segment

CORRIDOR_WIDTH = 1.75
CORRIDOR_LENGTH = 9.0
ROBOT_RADIUS = 0.3
HUMAN_RADIUS = 0.3
ROBOT_START = (0.5, 0.0)
ROBOT_GOAL = (8.5, 0.0)
TIMEOUT = 30.0

# attribute ranges (uniform)
BUFFER_RANGE = (0.0, 0.1)
HORIZON_RANGE = (1.0, 5.0)
SPEED_RANGE = (0.8, 1.4)
GOAL_JITTER = 0.4
# humans start in a band at either end of the corridor and leave through the other end
NEAR_BAND = (1.5, 3.5)
FAR_BAND = (5.5, 8.5)
NEAR_GOAL_X = CORRIDOR_LENGTH + 1.0
FAR_GOAL_X = -1.0
START_CLEARANCE = 0.1
ROBOT_START_CLEARANCE = 0.4   # keeps the robot's planning margin satisfied at t = 0
MAX_PLACEMENT_TRIES = 1000


class SeedInfeasibleError(RuntimeError):
    """Rejection sampling could not place every agent for this seed."""


@dataclass(frozen=True)
class HumanAttributes:
    radius: float
    radius_buffer: float
    orca_time_horizon: float
    goal: tuple
    max_speed: float
    preferred_speed: float
    orca_time_horizon_obst: float = 2.0

    def __post_init__(self):
        if not (self.radius > 0 and self.max_speed > 0 and self.preferred_speed > 0):
            raise ValueError("radius and speeds must be positive")
        if self.radius_buffer < 0:
            raise ValueError("radius_buffer must be non-negative")
        if not (self.orca_time_horizon > 0 and self.orca_time_horizon_obst > 0):
            raise ValueError("ORCA horizons must be positive")
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))

    @property
    def inflated_radius(self) -> float:
        return self.radius + self.radius_buffer


@dataclass(frozen=True)
class ScenarioConfig:
    width: float
    length: float
    walls: tuple
    robot_start: tuple          # (x, y, heading)
    robot_goal: tuple
    human_starts: tuple         # ((x, y), ...)
    humans: tuple               # (HumanAttributes, ...)
    seed: int = 0
    timeout: float = TIMEOUT
    robot_radius: float = ROBOT_RADIUS

    def __post_init__(self):
        if len(self.human_starts) != len(self.humans):
            raise ValueError("one start per human is required")
        if self.timeout <= 0 or self.width <= 0 or self.length <= 0:
            raise ValueError("timeout and corridor dimensions must be positive")
        starts = [np.asarray(self.robot_start[:2], float)] + [np.asarray(s, float) for s in self.human_starts]
        radii = [self.robot_radius] + [h.radius for h in self.humans]
        for i in range(len(starts)):
            for k in range(i + 1, len(starts)):
                if np.linalg.norm(starts[i] - starts[k]) < radii[i] + radii[k]:
                    raise ValueError(f"agents {i} and {k} start overlapping")

    @property
    def num_humans(self) -> int:
        return len(self.humans)


def corridor_walls(width: float = CORRIDOR_WIDTH, length: float = CORRIDOR_LENGTH) -> tuple:
    half = width / 2.0
    return (Segment((0.0, half), (length, half)), Segment((0.0, -half), (length, -half)))


def generate_corridor(seed: int, num_humans: int, *, width: float = CORRIDOR_WIDTH,
                      length: float = CORRIDOR_LENGTH, timeout: float = TIMEOUT) -> ScenarioConfig:
    """Deterministic random corridor with ``num_humans`` humans walking end to end."""
    if num_humans < 0:
        raise ValueError("num_humans must be non-negative")
    rng = np.random.default_rng(seed)
    half = width / 2.0
    robot = np.array(ROBOT_START)
    starts: list = []
    humans: list = []
    for j in range(num_humans):
        for _ in range(MAX_PLACEMENT_TRIES):
            buffer = rng.uniform(*BUFFER_RANGE)
            reach = HUMAN_RADIUS + buffer
            near = rng.random() < 0.5
            x = rng.uniform(*(NEAR_BAND if near else FAR_BAND))
            lat = half - reach - 0.05
            y = rng.uniform(-lat, lat)
            p = np.array([x, y])
            ok = np.linalg.norm(p - robot) >= ROBOT_RADIUS + reach + ROBOT_START_CLEARANCE
            for q, h in zip(starts, humans):
                ok = ok and np.linalg.norm(p - q) >= reach + h.inflated_radius + START_CLEARANCE
            if ok:
                break
        else:
            raise SeedInfeasibleError(f"seed {seed}: could not place human {j}")
        horizon = rng.uniform(*HORIZON_RANGE)
        speed = rng.uniform(*SPEED_RANGE)
        goal = (NEAR_GOAL_X if near else FAR_GOAL_X, rng.uniform(-GOAL_JITTER, GOAL_JITTER))
        starts.append(p)
        humans.append(HumanAttributes(HUMAN_RADIUS, float(buffer), float(horizon), goal,
                                      float(speed), float(speed)))
    return ScenarioConfig(width, length, corridor_walls(width, length),
                          (ROBOT_START[0], ROBOT_START[1], 0.0), ROBOT_GOAL,
                          tuple(tuple(float(c) for c in s) for s in starts), tuple(humans),
                          int(seed), float(timeout))

def scenario_to_dict(sc: ScenarioConfig) -> dict:
    return {
        "width": sc.width, "length": sc.length,
        "walls": [[w.endpoint_a.tolist(), w.endpoint_b.tolist()] for w in sc.walls],
        "robot_start": list(sc.robot_start), "robot_goal": list(sc.robot_goal),
        "human_starts": [list(s) for s in sc.human_starts],
        "humans": [{"radius": h.radius, "radius_buffer": h.radius_buffer,
                    "orca_time_horizon": h.orca_time_horizon, "goal": list(h.goal),
                    "max_speed": h.max_speed, "preferred_speed": h.preferred_speed,
                    "orca_time_horizon_obst": h.orca_time_horizon_obst} for h in sc.humans],
        "seed": sc.seed, "timeout": sc.timeout, "robot_radius": sc.robot_radius,
    }


def scenario_from_dict(data: dict) -> ScenarioConfig:
    """Inverse of :func:`scenario_to_dict`; raises ``ValueError`` on malformed input."""
    try:
        walls = tuple(Segment(tuple(a), tuple(b)) for a, b in data["walls"])
        humans = tuple(HumanAttributes(**h) for h in data["humans"])
        return ScenarioConfig(
            float(data["width"]), float(data["length"]), walls,
            tuple(float(c) for c in data["robot_start"]), tuple(float(c) for c in data["robot_goal"]),
            tuple(tuple(float(c) for c in s) for s in data["human_starts"]), humans,
            int(data.get("seed", 0)), float(data.get("timeout", TIMEOUT)),
            float(data.get("robot_radius", ROBOT_RADIUS)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scenario: {exc!r}") from None
