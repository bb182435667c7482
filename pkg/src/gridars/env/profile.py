"""Safe voltage recovery envelope anchored at the fault-clearing time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# time offsets (seconds after clearing) at which the envelope steps up, and
# the minimum voltage on each half-open band (a, b]
BAND_EDGES = (0.33, 0.5, 1.5)
BAND_LEVELS = (0.7, 0.8, 0.9, 0.95)
PENALTY_DELAY = 4.0
FINAL_LEVEL = 0.95


def elapsed_since(t, t_pf):
    # rounding keeps k * dt grids on the intended side of each band edge
    return np.round(np.asarray(t, dtype=float) - np.asarray(t_pf, dtype=float), 9)


@dataclass(frozen=True)
class RecoveryProfile:
    edges: tuple[float, ...] = BAND_EDGES
    levels: tuple[float, ...] = BAND_LEVELS

    def __post_init__(self):
        if len(self.levels) != len(self.edges) + 1:
            raise ValueError("need one more level than edges")
        if list(self.levels) != sorted(self.levels) or list(self.edges) != sorted(self.edges):
            raise ValueError("profile must be non-decreasing")

    def sigma(self, t, t_pf):
        """Envelope value; 0 (no requirement) up to and including clearing."""
        e = elapsed_since(t, t_pf)
        out = np.full(np.shape(e), self.levels[-1], dtype=float)
        for edge, level in zip(reversed(self.edges), reversed(self.levels[:-1])):
            out = np.where(e <= edge, level, out)
        out = np.where(e <= 0, 0.0, out)
        return out if out.ndim else float(out)


DEFAULT_PROFILE = RecoveryProfile()


@dataclass(frozen=True)
class ProfileCheck:
    violated: bool
    nadir: float


def check_profile_violation(trace, t_pf: float, dt: float = 0.1,
                            profile: RecoveryProfile = DEFAULT_PROFILE, t0: float = 0.0) -> ProfileCheck:
    """Compare one bus trace (sampled every ``dt`` from ``t0``) with the envelope.

    Only samples strictly after clearing count, both for the violation flag
    and for the nadir.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.ndim != 1 or trace.size == 0:
        raise ValueError("empty voltage trace")
    times = t0 + dt * np.arange(trace.size)
    post = elapsed_since(times, t_pf) > 0
    if not post.any():
        raise ValueError("trace ends before the fault is cleared")
    sig = profile.sigma(times[post], t_pf)
    vals = trace[post]
    return ProfileCheck(bool(np.any(vals < sig)), float(vals.min()))


def late_violation(trace, t_pf: float, dt: float = 0.1, t0: float = 0.0) -> bool:
    """True when the trace is below 0.95 p.u. anywhere after clearing + 4 s."""
    trace = np.asarray(trace, dtype=float)
    times = t0 + dt * np.arange(trace.shape[-1])
    late = elapsed_since(times, t_pf) > PENALTY_DELAY
    return bool(np.any(trace[..., late] < FINAL_LEVEL))
