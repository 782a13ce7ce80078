from crowdnav.prediction.baselines import (cvg_predict, cvmm_predict, estimate_velocities,
                                          mixture_predict, symmetric_modes)
from crowdnav.prediction.external import (ExternalPredictor, PredictionProtocolError,
                                          StaleSamplesError, external_predict)
from crowdnav.prediction.kde import kde_init_weights
from crowdnav.prediction.samples import HistoryWindow, SampleSet, TrajectorySample

__all__ = [
    "ExternalPredictor", "HistoryWindow", "PredictionProtocolError", "SampleSet",
    "StaleSamplesError", "TrajectorySample", "cvg_predict", "cvmm_predict",
    "estimate_velocities", "external_predict", "kde_init_weights", "mixture_predict",
    "symmetric_modes",
]
