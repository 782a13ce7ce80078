"""Built-in sample-set producers: constant-velocity baselines and a synthetic mixture."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from crowdnav.prediction.samples import HistoryWindow, SampleSet


def estimate_velocities(history: HistoryWindow, smoothing: int = 1) -> np.ndarray:
    """Finite-difference velocity per human, averaged over the last ``smoothing`` intervals.

    Humans with fewer than two history points get zero velocity.
    """
    vel = np.zeros((history.num_humans, 2))
    for j, hist in enumerate(history.agents):
        if hist.shape[0] < 2:
            continue
        k = min(max(smoothing, 1), hist.shape[0] - 1)
        dt = hist[-1, 0] - hist[-1 - k, 0]
        vel[j] = (hist[-1, 1:3] - hist[-1 - k, 1:3]) / dt
    return vel


def _constant_velocity_rollout(history: HistoryWindow, horizon: int, dt: float, smoothing: int):
    pos = history.current_positions()
    vel = estimate_velocities(history, smoothing)
    steps = dt * np.arange(1, horizon + 1)
    return pos[:, None, :] + steps[None, :, None] * vel[:, None, :]


def cvg_predict(history: HistoryWindow, horizon: int, num_samples: int = 1, *,
                dt: float | None = None, smoothing: int = 1, stamp: float = 0.0) -> SampleSet:
    """Constant-velocity-goal baseline: straight-line extrapolation, duplicated S times."""
    dt = history.dt if dt is None else dt
    rollout = _constant_velocity_rollout(history, horizon, dt, smoothing)
    positions = np.broadcast_to(rollout, (num_samples,) + rollout.shape)
    return SampleSet(positions, dt, stamp)


def cvmm_predict(history: HistoryWindow, horizon: int, num_samples: int = 1, *,
                 dt: float | None = None, smoothing: int = 1, stamp: float = 0.0) -> SampleSet:
    """Constant-velocity motion model. Same rollout as CVG; the planner keeps it frozen."""
    return cvg_predict(history, horizon, num_samples, dt=dt, smoothing=smoothing, stamp=stamp)


def mixture_predict(history: HistoryWindow, horizon: int, num_samples: int,
                    modes: Sequence[tuple[float, float]], noise_scale: float = 0.0, *,
                    rng: np.random.Generator | int | None = None, dt: float | None = None,
                    bend_steps: int = 4, smoothing: int = 1, stamp: float = 0.0) -> SampleSet:
    """Synthetic multimodal joint samples.

    ``modes`` holds ``(heading_offset_rad, probability)`` pairs. Each joint
    sample draws a mode per human; that human's path keeps its current speed
    while its heading turns linearly to ``current_heading + offset`` over
    ``bend_steps`` steps. Gaussian noise with std ``noise_scale * sqrt(t)`` is
    added to every position.
    """
    if not modes:
        raise ValueError("mixture_predict needs at least one mode")
    offsets = np.array([m[0] for m in modes], dtype=float)
    probs = np.array([m[1] for m in modes], dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("mode probabilities must be non-negative and sum to 1")
    rng = np.random.default_rng(rng)
    dt = history.dt if dt is None else dt
    pos = history.current_positions()
    vel = estimate_velocities(history, smoothing)
    n = history.num_humans
    speed = np.hypot(vel[:, 0], vel[:, 1])
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    choice = rng.choice(len(modes), size=(num_samples, n), p=probs / probs.sum())
    ramp = np.minimum(np.arange(1, horizon + 1) / max(bend_steps, 1), 1.0)
    steps = dt * np.arange(1, horizon + 1)
    out = np.empty((num_samples, n, horizon, 2))
    for s in range(num_samples):
        for j in range(n):
            offset = offsets[choice[s, j]]
            if offset == 0.0:
                out[s, j] = pos[j] + steps[:, None] * vel[j]
                continue
            ang = heading[j] + offset * ramp
            step = speed[j] * dt * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
            out[s, j] = pos[j] + np.cumsum(step, axis=0)
    if noise_scale > 0.0:
        sd = noise_scale * np.sqrt(dt * np.arange(1, horizon + 1))
        out += rng.normal(size=out.shape) * sd[None, None, :, None]
    return SampleSet(out, dt, stamp)


def mode_labels(num_samples: int, num_humans: int, modes, rng) -> np.ndarray:
    """Mode indices drawn by :func:`mixture_predict` for the same ``rng`` seed."""
    probs = np.array([m[1] for m in modes], dtype=float)
    rng = np.random.default_rng(rng)
    return rng.choice(len(modes), size=(num_samples, num_humans), p=probs / probs.sum())


def symmetric_modes(spread: float = math.radians(35.0), side_prob: float = 0.25):
    """Straight plus symmetric left/right turn modes, used by the corridor benchmark."""
    return [(0.0, 1.0 - 2.0 * side_prob), (spread, side_prob), (-spread, side_prob)]
