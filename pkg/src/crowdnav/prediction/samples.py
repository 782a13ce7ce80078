from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TrajectorySample:
    """One joint sample: ``positions[j, k]`` is human ``j`` at future step ``k + 1``."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[2] != 2 or pos.shape[0] < 1 or pos.shape[1] < 1:
            raise ValueError(f"sample must have shape (N, T, 2), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("sample positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)


@dataclass(frozen=True)
class SampleSet:
    """S joint trajectory samples stored as one ``(S, N, T, 2)`` array."""

    positions: np.ndarray
    dt: float
    stamp: float = 0.0
    stale: bool = False

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 4 or pos.shape[3] != 2:
            raise ValueError(f"sample set must have shape (S, N, T, 2), got {pos.shape}")
        if pos.shape[0] < 1 or pos.shape[2] < 1:
            raise ValueError("sample set needs S >= 1 and T >= 1")
        if not np.all(np.isfinite(pos)):
            raise ValueError("sample positions must be finite")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample], dt: float, stamp: float = 0.0):
        shapes = {s.positions.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"samples disagree on (N, T): {sorted(shapes)}")
        return cls(np.stack([s.positions for s in samples]), dt, stamp)

    @property
    def num_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def num_humans(self) -> int:
        return self.positions.shape[1]

    @property
    def horizon(self) -> int:
        return self.positions.shape[2]

    @property
    def samples(self) -> list[TrajectorySample]:
        return [TrajectorySample(p) for p in self.positions]

    def at_step(self, k: int) -> np.ndarray:
        """``(S, N, 2)`` sample positions at future step ``k`` (1-based)."""
        return self.positions[:, :, k - 1, :]

    def as_stale(self) -> "SampleSet":
        return SampleSet(self.positions, self.dt, self.stamp, stale=True)


@dataclass(frozen=True)
class HistoryWindow:
    """Recent motion of every human (rows ``[t, x, y]``) and the robot (``[t, x, y, theta]``)."""

    agents: tuple
    robot: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    ids: tuple = ()
    dt: float = 0.25

    def __post_init__(self):
        agents = []
        for hist in self.agents:
            arr = np.array(hist, dtype=float).reshape(-1, 3)
            if arr.shape[0] > 1 and np.any(np.diff(arr[:, 0]) <= 0):
                raise ValueError("history timestamps must be strictly increasing")
            agents.append(arr)
        object.__setattr__(self, "agents", tuple(agents))
        object.__setattr__(self, "robot", np.array(self.robot, dtype=float).reshape(-1, 4))
        ids = tuple(self.ids) if self.ids else tuple(range(len(agents)))
        if len(ids) != len(agents):
            raise ValueError("ids and agent histories differ in length")
        object.__setattr__(self, "ids", ids)

    @property
    def num_humans(self) -> int:
        return len(self.agents)

    def current_positions(self) -> np.ndarray:
        return np.array([h[-1, 1:3] for h in self.agents]).reshape(-1, 2)
