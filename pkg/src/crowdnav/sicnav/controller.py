"""Receding-horizon controller: one bilevel MPC solve per control period."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional, TextIO

import numpy as np

from crowdnav.core import RobotAction, SystemState, wrap_angle
from crowdnav.nlp.problem import NlpProblem, NlpSolution
from crowdnav.nlp.sqp import solve
from crowdnav.prediction.kde import kde_init_weights
from crowdnav.prediction.samples import SampleSet
from crowdnav.sicnav.config import MpcConfig, MpcSolutionBundle
from crowdnav.sicnav.costs import collision_values
from crowdnav.sicnav.rollout import ImplicitProblem, PlanContext, rollout


@dataclass
class ControllerState:
    """What carries over between control steps."""

    u_prev: np.ndarray = field(default_factory=lambda: np.zeros(2))
    plan: Optional[np.ndarray] = None         # (T, 2) last accepted action sequence
    multipliers: Optional[dict] = None
    steps: int = 0

    def reset(self):
        self.u_prev = np.zeros(2)
        self.plan = None
        self.multipliers = None
        self.steps = 0


def rate_feasible(plan: np.ndarray, u_prev: np.ndarray, config: MpcConfig) -> np.ndarray:
    """Clip a plan step by step so that bounds and rate limits hold."""
    lim = config.limits
    out = np.empty_like(plan)
    prev = np.asarray(u_prev, float)
    for t in range(plan.shape[0]):
        lo = np.maximum(lim.lower, prev + lim.rate_lower)
        hi = np.minimum(lim.upper, prev + lim.rate_upper)
        out[t] = np.clip(plan[t], lo, np.maximum(lo, hi))
        prev = out[t]
    return out


def braking_plan(u_prev: np.ndarray, config: MpcConfig) -> np.ndarray:
    """Decelerate at the maximum rate toward zero speed and zero turn rate."""
    return rate_feasible(np.zeros((config.horizon, 2)), u_prev, config)


def heading_plan(robot0: np.ndarray, u_prev: np.ndarray, config: MpcConfig) -> np.ndarray:
    """Cold-start guess: turn toward the goal and drive, within rate limits."""
    T, dt = config.horizon, config.dt
    lim = config.limits
    goal = config.goal_array
    x = np.array(robot0, float)
    prev = np.asarray(u_prev, float)
    plan = np.empty((T, 2))
    for t in range(T):
        delta = goal - x[:2]
        dist = float(np.hypot(*delta))
        err = wrap_angle(math.atan2(delta[1], delta[0]) - x[2]) if dist > 1e-9 else 0.0
        want = np.array([min(lim.upper[0], dist / (2.0 * dt)) * max(math.cos(err), 0.0), err / (2.0 * dt)])
        lo = np.maximum(lim.lower, prev + lim.rate_lower)
        hi = np.minimum(lim.upper, prev + lim.rate_upper)
        plan[t] = np.clip(want, lo, np.maximum(lo, hi))
        v, w = plan[t]
        x = np.array([x[0] + dt * v * math.cos(x[2]), x[1] + dt * v * math.sin(x[2]), x[2] + dt * w, v])
        prev = plan[t]
    return plan


def plan_context(measured: SystemState, samples: SampleSet, weights0: np.ndarray, u_prev,
                 config: MpcConfig) -> PlanContext:
    n = measured.num_humans
    if samples.num_humans != n:
        raise ValueError(f"samples cover {samples.num_humans} humans, state has {n}")
    if samples.horizon < config.horizon:
        raise ValueError(f"samples cover {samples.horizon} steps, horizon needs {config.horizon}")
    if not math.isclose(samples.dt, config.dt, rel_tol=1e-9):
        raise ValueError(f"sample dt {samples.dt} differs from controller dt {config.dt}")
    hp = np.array([h.position for h in measured.humans]).reshape(n, 2)
    hv = np.array([h.velocity for h in measured.humans]).reshape(n, 2)
    return PlanContext(config, measured.robot.as_array(), hp, hv,
                       np.ascontiguousarray(samples.positions[:, :, :config.horizon]),
                       np.asarray(weights0, float), np.asarray(u_prev, float))


def _entropy(w: np.ndarray) -> float:
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


def _build_problem(ctx: PlanContext, config: MpcConfig, guess: np.ndarray):
    """Returns the NLP, its initial point and a map from its solution to actions."""
    if config.formulation == "implicit":
        return ImplicitProblem(ctx).nlp(), guess.ravel(), lambda x: x.reshape(-1, 2)
    from crowdnav.sicnav.assemble import assemble_context, initial_point
    problem, layout = assemble_context(ctx)
    return problem, initial_point(ctx, layout, guess), layout.actions


def control_step(state: ControllerState, measured: SystemState, samples: SampleSet,
                 config: MpcConfig, *, log: Optional[TextIO] = None) -> MpcSolutionBundle:
    """Plan from ``measured`` and return the bundle whose first action is executed.

    ``state`` is updated in place with the executed action and the plan used
    for the next warm start.
    """
    t0 = time.perf_counter()
    T = config.horizon
    weights0 = kde_init_weights(samples).weights
    ctx = plan_context(measured, samples, weights0, state.u_prev, config)
    if state.plan is not None and state.plan.shape == (T, 2):
        guess = np.vstack([state.plan[1:], state.plan[-1:]])
    else:
        guess = heading_plan(ctx.robot0, state.u_prev, config)
    guess = rate_feasible(guess, state.u_prev, config)

    problem: NlpProblem
    problem, x0, to_actions = _build_problem(ctx, config, guess)
    sol: NlpSolution = solve(problem, x0, config.solver, multipliers=state.multipliers)
    usable = sol.converged or (sol.status != "numerical_failure" and sol.violation <= config.feasibility_tol)
    if usable:
        actions = rate_feasible(to_actions(sol.x), state.u_prev, config)
        state.multipliers = sol.multipliers
    else:
        actions = braking_plan(state.u_prev, config)
        state.multipliers = None
    ro = rollout(ctx, actions.ravel(), with_jac=False)

    state.u_prev = actions[0].copy()
    state.plan = actions.copy()
    state.steps += 1

    min_clear = np.inf
    for t in range(1, T + 1):
        c, _, _ = collision_values(ro.robot[t, :2], ro.humans[t], config)
        if c.size:
            min_clear = min(min_clear, float(c.min()))
    elapsed = time.perf_counter() - t0
    diagnostics = {
        "step": state.steps,
        "solve_time": elapsed,
        "status": sol.status,
        "kkt_residual": sol.kkt_residual,
        "iterations": sol.iterations,
        "violation": sol.violation,
        "fallback": not usable,
        "stale_samples": bool(samples.stale),
        "softened_lower_level": ro.softened,
        "weight_entropy": _entropy(ro.weights[T - 1]),
        "min_predicted_clearance": min_clear,
        "message": sol.message,
    }
    if log is not None:
        log.write(json.dumps(diagnostics) + "\n")
    duals = [[ro.duals[t, j].copy() for j in range(ctx.num_humans)] for t in range(T)]
    return MpcSolutionBundle(
        action=RobotAction(float(actions[0, 0]), float(actions[0, 1])),
        robot_trajectory=ro.robot, actions=actions, human_trajectories=ro.humans,
        human_velocities=ro.velocities, weights=ro.weights[:T].copy(), duals=duals,
        status=sol.status, kkt_residual=sol.kkt_residual, iterations=sol.iterations,
        solve_time=elapsed, fallback=not usable, diagnostics=diagnostics,
        final_weights=ro.weights[T].copy())


class SicnavController:
    """Stateful wrapper around :func:`control_step`."""

    def __init__(self, config: MpcConfig, *, log: Optional[TextIO] = None):
        self.config = config
        self.state = ControllerState()
        self.log = log

    def reset(self):
        self.state.reset()

    def step(self, measured: SystemState, samples: SampleSet) -> MpcSolutionBundle:
        return control_step(self.state, measured, samples, self.config, log=self.log)
