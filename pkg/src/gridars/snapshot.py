"""Immutable lower-policy publications and the feed that orders them."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .policy import LstmPolicySpec, RunningNormalizer


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    area: int
    version: int  # publication sequence number, 1, 2, ...
    iteration: int  # DARS iterations completed when published
    spec: LstmPolicySpec
    theta: np.ndarray
    normalizer: RunningNormalizer
    converged: bool = False
    tick: int = 0  # scheduler tick at publication (lockstep mode)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)


class SnapshotFeed:
    """Append-only per-area publication log; readers only ever see whole records."""

    def __init__(self, areas):
        self._log = {a: [] for a in areas}
        self._lock = threading.Lock()

    @property
    def areas(self) -> list[int]:
        return sorted(self._log)

    def publish(self, snap: PolicySnapshot) -> None:
        with self._lock:
            log = self._log[snap.area]
            if log and snap.version <= log[-1].version:
                raise ValueError(f"area {snap.area}: snapshot version {snap.version} is not newer "
                                 f"than {log[-1].version}")
            log.append(snap)

    def latest(self, area: int, max_tick: int | None = None) -> PolicySnapshot | None:
        with self._lock:
            log = self._log[area]
            if max_tick is not None:
                log = [s for s in log if s.tick <= max_tick]
            return log[-1] if log else None

    def history(self, area: int) -> list[PolicySnapshot]:
        with self._lock:
            return list(self._log[area])

    def all_published(self, max_tick: int | None = None) -> bool:
        return all(self.latest(a, max_tick) is not None for a in self.areas)
