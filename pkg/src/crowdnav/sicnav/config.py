"""Planner configuration and solution bundle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from crowdnav.core import ActuationLimits, RobotAction, Segment
from crowdnav.nlp.problem import SolverSettings
from crowdnav.orca import OrcaParams
from crowdnav.refine import RefineConfig

MODES = ("bilevel", "frozen_predictions")
FORMULATIONS = ("implicit", "kkt")


@dataclass(frozen=True)
class MpcConfig:
    goal: tuple = (0.0, 0.0)
    horizon: int = 8
    dt: float = 0.25
    q_diag: tuple = (1.0, 1.0)
    r_diag: tuple = (0.1, 0.05)
    terminal_scale: float = 10.0
    limits: ActuationLimits = field(default_factory=ActuationLimits)
    robot_radius: float = 0.3
    human_radius: float = 0.3
    obstacles: tuple = ()
    human_margin: float = 0.05
    obstacle_margin: float = 0.05
    orca: OrcaParams = field(default_factory=OrcaParams)
    refine: RefineConfig = field(default_factory=RefineConfig)
    solver: SolverSettings = field(default_factory=lambda: SolverSettings(
        max_iter=12, max_iter_per_stage=12, kkt_tol=1e-4, trust_radius=0.5))
    feasibility_tol: float = 0.02        # accepted violation (m^2) of a non-converged iterate
    mode: str = "bilevel"
    formulation: str = "implicit"
    replan_period: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.terminal_scale < 1:
            raise ValueError("terminal_scale must be at least 1")
        if min(self.q_diag) < 0 or min(self.r_diag) < 0 or len(self.q_diag) != 2 or len(self.r_diag) != 2:
            raise ValueError("Q and R must be 2-element non-negative diagonals")
        if not self.feasibility_tol > 0:
            raise ValueError("feasibility_tol must be positive")
        if self.human_margin < 0 or self.obstacle_margin < 0:
            raise ValueError("margins must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}")
        if not all(isinstance(s, Segment) for s in self.obstacles):
            raise ValueError("obstacles must be Segment instances")

    @property
    def goal_array(self) -> np.ndarray:
        return np.array(self.goal)

    @property
    def human_clearance(self) -> float:
        """d_j: minimum robot-human centre distance."""
        return self.robot_radius + self.human_radius + self.human_margin

    @property
    def obstacle_clearance(self) -> float:
        """d_l: minimum robot-segment distance."""
        return self.robot_radius + self.obstacle_margin


@dataclass
class MpcSolutionBundle:
    action: RobotAction
    robot_trajectory: np.ndarray          # (T+1, 4) x, y, heading, speed
    actions: np.ndarray                   # (T, 2)
    human_trajectories: np.ndarray        # (T+1, N, 2) refined positions
    human_velocities: np.ndarray          # (T, N, 2) lower-level solutions
    weights: np.ndarray                   # (T, S) w_0 .. w_{T-1}
    duals: list                           # per step, per human: half-plane duals
    status: str
    kkt_residual: float
    iterations: int
    solve_time: float
    fallback: bool = False
    diagnostics: dict = field(default_factory=dict)
    final_weights: Optional[np.ndarray] = None   # w_T, for inspection only
