"""Initial importance weights from a leave-one-out Gaussian KDE over joint samples."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from crowdnav.core import WeightVector
from crowdnav.prediction.samples import SampleSet


def scott_bandwidth(points: np.ndarray) -> np.ndarray:
    """Per-dimension Scott's rule ``S**(-1/(d+4)) * std`` (zero for constant dimensions)."""
    s, d = points.shape
    return s ** (-1.0 / (d + 4)) * points.std(axis=0, ddof=1)


def kde_log_density(points: np.ndarray, bandwidth: np.ndarray) -> np.ndarray:
    """Leave-one-out log density of each point under a diagonal Gaussian KDE.

    Dimensions with zero bandwidth carry no information and are dropped.
    """
    keep = bandwidth > 0.0
    x = points[:, keep] / bandwidth[keep]
    s, d = x.shape
    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    log_k = -0.5 * sq - 0.5 * d * np.log(2.0 * np.pi) - np.sum(np.log(bandwidth[keep]))
    np.fill_diagonal(log_k, -np.inf)
    return logsumexp(log_k, axis=1) - np.log(s - 1)


def kde_init_weights(samples: SampleSet, bandwidth_rule: str = "scott") -> WeightVector:
    """Weights proportional to each joint sample's leave-one-out KDE density."""
    if bandwidth_rule != "scott":
        raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
    s = samples.num_samples
    if s < 2:
        return WeightVector.uniform(s)
    points = samples.positions.reshape(s, -1)
    bw = scott_bandwidth(points)
    if not np.any(bw > 0.0):
        return WeightVector.uniform(s)
    logd = kde_log_density(points, bw)
    if not np.any(np.isfinite(logd)):
        return WeightVector.uniform(s)
    w = np.exp(logd - logd.max())
    return WeightVector(w)
