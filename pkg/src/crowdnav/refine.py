"""Sample fusion: weighted intents, intent velocities and the importance-weight update.

Time indexing used throughout the planner: ``w_0`` comes from the KDE, the
intent for step ``t -> t+1`` uses ``w_t`` with the samples at ``t+1``, and
``w_t = weight_update(w_{t-1}, x_ref_t, y_t)`` once the refined positions at
``t`` are known.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crowdnav.core import HumanState, WeightVector


@dataclass(frozen=True)
class RefineConfig:
    sigma: float = 0.25          # m^2
    weight_floor: float = 1e-6

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.weight_floor < 1.0:
            raise ValueError("weight_floor must lie in [0, 1)")

    def check_floor(self, num_samples: int):
        if num_samples > 1 and self.weight_floor >= 1.0 / num_samples:
            raise ValueError(f"weight_floor {self.weight_floor} must be below 1/S = {1 / num_samples}")


def _weights_array(weights) -> np.ndarray:
    return weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)


def weighted_intent(samples_at_t1: np.ndarray, weights) -> np.ndarray:
    """Per-human weighted mean of the sample positions, shape ``(N, 2)``."""
    y = np.asarray(samples_at_t1, dtype=float)
    w = _weights_array(weights)
    if y.ndim != 3 or y.shape[-1] != 2 or y.shape[0] != w.shape[0]:
        raise ValueError(f"samples of shape {y.shape} do not match {w.shape[0]} weights")
    return np.einsum("s,snk->nk", w, y)


def intent_velocity(human_state: HumanState | np.ndarray, intent_position, dt: float) -> np.ndarray:
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    pos = human_state.position if isinstance(human_state, HumanState) else np.asarray(human_state)
    return (np.asarray(intent_position, dtype=float) - pos) / dt


def _squared_errors(refined: np.ndarray, samples_at_t: np.ndarray) -> np.ndarray:
    diff = samples_at_t - refined[None, :, :]
    return np.sum(diff * diff, axis=(1, 2))


def weight_update_arrays(prev: np.ndarray, refined: np.ndarray, samples_at_t: np.ndarray,
                         sigma: float, floor: float) -> np.ndarray:
    s, n, _ = samples_at_t.shape
    if n == 0:
        return prev.copy()
    err = _squared_errors(refined, samples_at_t)
    logit = -err / (n * sigma)
    bar = np.exp(logit - logit.max())
    bar /= bar.sum()
    prod = prev * bar
    total = prod.sum()
    w = prod / total if total > 0.0 and np.isfinite(total) else bar
    if floor > 0.0:
        w = np.maximum(w, floor)
        w /= w.sum()
    return w


def weight_update(prev_weights: WeightVector, refined_positions, sample_positions_at_t,
                  config: RefineConfig = RefineConfig()) -> WeightVector:
    """One step of the importance-weight dynamics (product with a softmax likelihood, then floor)."""
    prev = _weights_array(prev_weights)
    y = np.asarray(sample_positions_at_t, dtype=float)
    x = np.asarray(refined_positions, dtype=float).reshape(-1, 2)
    if y.shape != (prev.shape[0], x.shape[0], 2):
        raise ValueError(f"samples of shape {y.shape} do not match weights {prev.shape} "
                         f"and refined positions {x.shape}")
    config.check_floor(prev.shape[0])
    return WeightVector(weight_update_arrays(prev, x, y, config.sigma, config.weight_floor))


def weight_update_jac(prev: np.ndarray, refined: np.ndarray, samples_at_t: np.ndarray,
                      sigma: float, floor: float):
    """Update plus Jacobians ``dw/dprev`` (S x S) and ``dw/drefined`` (S x 2N).

    Floored entries are treated as locally constant.
    """
    s, n, _ = samples_at_t.shape
    if n == 0:
        return prev.copy(), np.eye(s), np.zeros((s, 0))
    err = _squared_errors(refined, samples_at_t)
    logit = -err / (n * sigma)
    bar = np.exp(logit - logit.max())
    bar /= bar.sum()
    prod = prev * bar
    total = prod.sum()
    w = prod / total
    # d w / d prev = (I - w 1^T) diag(bar) / total
    d_prev = (np.diag(bar) - np.outer(w, bar)) / total
    # d w / d err = -(diag(w) - w w^T) / (N sigma)
    d_err = -(np.diag(w) - np.outer(w, w)) / (n * sigma)
    derr_dx = (-2.0 * (samples_at_t - refined[None])).reshape(s, 2 * n)
    d_x = d_err @ derr_dx
    if floor > 0.0:
        mask = (w > floor).astype(float)
        f = np.maximum(w, floor)
        ftot = f.sum()
        out = f / ftot
        proj = (np.eye(s) - np.outer(out, np.ones(s))) / ftot
        d_prev = proj @ (mask[:, None] * d_prev)
        d_x = proj @ (mask[:, None] * d_x)
        w = out
    return w, d_prev, d_x
