"""Benchmark metrics over episode results."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence


@dataclass(frozen=True)
class Metrics:
    success_rate: float
    avg_nav_time: float          # successes only; the timeout when there are none
    collision_freq: float        # collision steps per simulated second
    frozen_freq: float           # frozen steps per simulated second
    episodes: int
    nav_time_is_sentinel: bool = False

    def as_dict(self) -> dict:
        return asdict(self)

    def table_row(self, name: str) -> str:
        nav = "timeout" if self.nav_time_is_sentinel else f"{self.avg_nav_time:.2f}"
        return (f"{name:<16} {self.success_rate:>7.2f} {nav:>9} {self.collision_freq:>10.4f} "
                f"{self.frozen_freq:>10.4f}")


TABLE_HEADER = f"{'method':<16} {'success':>7} {'nav_time':>9} {'coll_freq':>10} {'froz_freq':>10}"


def aggregate_metrics(results: Sequence) -> Metrics:
    """Success rate, mean navigation time of successes, and per-second event frequencies."""
    if len(results) == 0:
        raise ValueError("aggregate_metrics needs at least one result")
    # sort so the floating-point sums do not depend on result order
    ordered = sorted(results, key=lambda r: (r.seed, r.total_steps, r.collision_steps, r.frozen_steps))
    wins = [r for r in ordered if r.success]
    total_time = sum(r.total_steps * r.dt for r in ordered)
    if wins:
        nav = sum(r.nav_time for r in wins) / len(wins)
        sentinel = False
    else:
        nav = max(r.timeout for r in ordered)
        sentinel = True
    return Metrics(
        success_rate=len(wins) / len(ordered),
        avg_nav_time=float(nav),
        collision_freq=sum(r.collision_steps for r in ordered) / total_time if total_time > 0 else 0.0,
        frozen_freq=sum(r.frozen_steps for r in ordered) / total_time if total_time > 0 else 0.0,
        episodes=len(ordered),
        nav_time_is_sentinel=sentinel,
    )
