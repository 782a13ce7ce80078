"""Scripted planning scenes shared by the sicnav unit tests and the acceptance suite."""
import math

import numpy as np

from crowdnav.core import HumanState, RobotState, SystemState, WeightVector
from crowdnav.nlp.problem import SolverSettings
from crowdnav.prediction import HistoryWindow, mixture_predict
from crowdnav.prediction.baselines import mode_labels
from crowdnav.sicnav import MpcConfig
from crowdnav.sicnav.rollout import PlanContext
from crowdnav.sim.scenario import corridor_walls

DT = 0.25


def two_mode_scene(seed=0, lane=0.3, human_x=3.5, spread_deg=25.0, noise=0.05, max_iter=40):
    """One human walking head-on down the corridor, S=9 samples bending to its left or right.

    The robot drives in the lane at ``y = lane`` so exactly one mode (the human
    stepping to the other half of the corridor) stays clear of its path.
    Returns ``(measured, samples, labels, config, u_prev)``.
    """
    history = HistoryWindow(agents=(np.array([[0.0, human_x + 0.25, 0.0], [DT, human_x, 0.0]]),), dt=DT)
    modes = [(math.radians(spread_deg), 0.5), (-math.radians(spread_deg), 0.5)]
    samples = mixture_predict(history, 8, 9, modes, noise, rng=seed)
    labels = mode_labels(9, 1, modes, seed)[:, 0]
    config = MpcConfig(goal=(8.5, lane), obstacles=corridor_walls(),
                       solver=SolverSettings(max_iter=max_iter, max_iter_per_stage=max_iter,
                                             kkt_tol=1e-4, trust_radius=0.5))
    measured = SystemState(RobotState(np.array([0.5, lane]), 0.0, 0.5),
                           (HumanState(np.array([human_x, 0.0]), np.array([-1.0, 0.0])),),
                           WeightVector.uniform(9))
    return measured, samples, labels, config, np.array([0.5, 0.0])


def clear_mode(samples, labels, robot_plan, clearance):
    """Modes whose mean sample path keeps ``clearance`` from the planned robot positions."""
    out = []
    for m in np.unique(labels):
        mean = samples.positions[labels == m, 0].mean(axis=0)
        gap = np.linalg.norm(mean - robot_plan[1:, :2], axis=1)
        if np.all(gap >= clearance):
            out.append(int(m))
    return out


def random_context(rng, num_humans=None, horizon=None, num_samples=None, walls=True,
                   formulation="kkt"):
    """Random small planning context for finite-difference checks of the full-space problem."""
    n = int(rng.integers(1, 4)) if num_humans is None else num_humans
    T = int(rng.integers(2, 5)) if horizon is None else horizon
    S = int(rng.integers(2, 5)) if num_samples is None else num_samples
    obstacles = corridor_walls() if walls else ()
    cfg = MpcConfig(goal=(8.5, 0.0), horizon=T, obstacles=obstacles, formulation=formulation)
    pos = np.column_stack([rng.uniform(1.5, 4.5, n), rng.uniform(-0.5, 0.5, n)])
    vel = np.column_stack([rng.uniform(-1.2, 1.2, n), rng.uniform(-0.2, 0.2, n)])
    steps = DT * np.arange(1, T + 1)
    base = pos[None, :, None, :] + steps[None, None, :, None] * vel[None, :, None, :]
    samples = base + 0.1 * rng.normal(size=(S, n, T, 2)) * np.sqrt(steps)[None, None, :, None]
    w = rng.random(S) + 0.1
    robot0 = np.array([0.5, rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3), rng.uniform(0.0, 0.8)])
    u_prev = np.array([robot0[3], 0.0])
    return PlanContext(cfg, robot0, pos, vel, samples, w / w.sum(), u_prev)


def random_actions(rng, T):
    return np.column_stack([rng.uniform(0.0, 1.0, T), rng.uniform(-1.0, 1.0, T)])

