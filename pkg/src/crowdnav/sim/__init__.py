from crowdnav.sim.episode import (EpisodeResult, Predictor, TraceFormatError, read_trace,
                                  result_from_trace, run_episode, write_trace)
from crowdnav.sim.metrics import Metrics, aggregate_metrics
from crowdnav.sim.scenario import (HumanAttributes, ScenarioConfig, SeedInfeasibleError,
                                   generate_corridor, scenario_from_dict, scenario_to_dict)
from crowdnav.sim.world import World, robot_collides, step_world

__all__ = [
    "EpisodeResult", "HumanAttributes", "Metrics", "Predictor", "ScenarioConfig",
    "SeedInfeasibleError", "TraceFormatError", "World", "aggregate_metrics", "generate_corridor",
    "read_trace", "result_from_trace", "robot_collides", "run_episode", "scenario_from_dict",
    "scenario_to_dict", "step_world", "write_trace",
]
