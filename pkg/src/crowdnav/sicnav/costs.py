"""Stage and terminal costs, robot collision constraints."""
from __future__ import annotations

import numpy as np

from crowdnav.core import RobotAction, SystemState, closest_point_on_segment
from crowdnav.sicnav.config import MpcConfig


def _action_array(action) -> np.ndarray:
    return action.as_array() if isinstance(action, RobotAction) else np.asarray(action, float)


def position_cost(p_robot, config: MpcConfig) -> float:
    e = np.asarray(p_robot, float) - config.goal_array
    return float(e @ (np.asarray(config.q_diag) * e))


def stage_cost(state: SystemState, action, config: MpcConfig) -> float:
    u = _action_array(action)
    return position_cost(state.robot.position, config) + float(u @ (np.asarray(config.r_diag) * u))


def terminal_cost(state: SystemState, config: MpcConfig) -> float:
    return config.terminal_scale * position_cost(state.robot.position, config)


def collision_values(p_robot: np.ndarray, p_humans: np.ndarray, config: MpcConfig):
    """Constraint values (>= 0 feasible) and their gradients.

    Returns ``(c, dc_drobot (m, 2), dc_dhumans (m, N, 2))`` with one row per
    human followed by one row per segment. Squared segment distance is C1, so
    the nearest point supplies the gradient for either feature.
    """
    n = p_humans.shape[0]
    m = n + len(config.obstacles)
    c = np.empty(m)
    d_r = np.empty((m, 2))
    d_h = np.zeros((m, n, 2))
    dj2 = config.human_clearance ** 2
    for j in range(n):
        diff = p_robot - p_humans[j]
        c[j] = diff @ diff - dj2
        d_r[j] = 2.0 * diff
        d_h[j, j] = -2.0 * diff
    dl2 = config.obstacle_clearance ** 2
    for i, seg in enumerate(config.obstacles):
        q, _ = closest_point_on_segment(p_robot, seg.endpoint_a, seg.endpoint_b)
        diff = p_robot - q
        c[n + i] = diff @ diff - dl2
        d_r[n + i] = 2.0 * diff
    return c, d_r, d_h


def collision_constraints(state: SystemState, config: MpcConfig) -> np.ndarray:
    humans = np.array([h.position for h in state.humans]).reshape(-1, 2)
    return collision_values(state.robot.position, humans, config)[0]
