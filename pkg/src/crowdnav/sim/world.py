"""Closed-loop world: a unicycle robot among ORCA humans in a walled corridor."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from crowdnav.core import (HumanState, RobotAction, RobotState, integrator_step, point_segment_distance,
                           unicycle_step)
from crowdnav.orca import (DegenerateGeometryError, InfeasibleGeometryError, OrcaParams,
                           agent_halfplane, obstacle_halfplane, solve_orca_qp)
from crowdnav.sim.scenario import ScenarioConfig

ROBOT_RESPONSIBILITY = 0.5   # humans assume the robot reciprocates


@dataclass(frozen=True)
class World:
    scenario: ScenarioConfig
    time: float
    robot: RobotState
    humans: tuple

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig) -> "World":
        x, y, th = scenario.robot_start
        robot = RobotState(np.array([x, y]), th, 0.0)
        humans = tuple(HumanState(np.array(p, float), np.zeros(2)) for p in scenario.human_starts)
        return cls(scenario, 0.0, robot, humans)

    def human_positions(self) -> np.ndarray:
        return np.array([h.position for h in self.humans]).reshape(-1, 2)


def preferred_velocity(position, attrs, dt: float) -> np.ndarray:
    """Preferred speed toward the goal, slowing so the goal is not overshot."""
    delta = np.asarray(attrs.goal) - position
    dist = float(np.hypot(*delta))
    if dist < 1e-9:
        return np.zeros(2)
    return delta / dist * min(attrs.preferred_speed, dist / dt)


def human_velocity(world: World, j: int, dt: float) -> np.ndarray:
    """One ORCA decision for human ``j`` with its own radius, buffer and horizon."""
    sc = world.scenario
    attrs = sc.humans[j]
    me = world.humans[j]
    reach = attrs.inflated_radius
    params = OrcaParams(time_horizon=attrs.orca_time_horizon,
                        time_horizon_obst=attrs.orca_time_horizon_obst,
                        max_speed=attrs.max_speed, time_step=dt)
    planes = []
    for k, other in enumerate(world.humans):
        if k == j:
            continue
        # the other human's buffer is not observable: use its true radius
        try:
            planes.append(agent_halfplane(me.position, me.velocity, other.position, other.velocity,
                                          reach + sc.humans[k].radius, params.time_horizon,
                                          params.responsibility, dt))
        except DegenerateGeometryError:
            pass
    try:
        planes.append(agent_halfplane(me.position, me.velocity, world.robot.position,
                                      world.robot.velocity, reach + sc.robot_radius,
                                      params.time_horizon, ROBOT_RESPONSIBILITY, dt))
    except DegenerateGeometryError:
        pass
    for wall in sc.walls:
        planes.extend(obstacle_halfplane(me.position, wall, reach, params.time_horizon_obst, dt))
    try:
        return solve_orca_qp(planes, preferred_velocity(me.position, attrs, dt), params).velocity
    except InfeasibleGeometryError:
        return np.zeros(2)


def step_world(world: World, robot_action: RobotAction, dt: float) -> World:
    """Advance every agent by ``dt``; humans decide simultaneously from the current state."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    velocities = [human_velocity(world, j, dt) for j in range(len(world.humans))]
    humans = tuple(integrator_step(h, v, dt) for h, v in zip(world.humans, velocities))
    robot = unicycle_step(world.robot, robot_action, dt)
    return replace(world, time=world.time + dt, robot=robot, humans=humans)


def robot_collides(world: World) -> bool:
    """Centre distance below the true radius sum, or wall clearance below the robot radius."""
    sc = world.scenario
    p = world.robot.position
    for h, attrs in zip(world.humans, sc.humans):
        if np.linalg.norm(p - h.position) < sc.robot_radius + attrs.radius:
            return True
    return any(point_segment_distance(p, w) < sc.robot_radius for w in sc.walls)
