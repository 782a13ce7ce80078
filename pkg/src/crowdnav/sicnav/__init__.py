from crowdnav.sicnav.config import MpcConfig, MpcSolutionBundle
from crowdnav.sicnav.controller import ControllerState, SicnavController, control_step
from crowdnav.sicnav.costs import collision_constraints, stage_cost, terminal_cost

__all__ = [
    "ControllerState", "MpcConfig", "MpcSolutionBundle", "SicnavController", "collision_constraints",
    "control_step", "stage_cost", "terminal_cost",
]
