"""Data-driven choice of the foreign buses each area agent observes.

Every controllable load bus of an area is faulted in turn with zero control.
A foreign area whose buses break the recovery envelope more than a handful
of times contributes its worst-hit buses (post-clearing nadir under a
threshold) to the observation set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env.profile import DEFAULT_PROFILE, RecoveryProfile, check_profile_violation
from .env.surrogate import BatchGrid, FaultScenario, GridModel
from .env.topology import TopologyError

DEFAULT_PROBE_DURATIONS = (0.05, 0.08, 0.1)
NADIR_THRESHOLD = 0.75
SMALL_FRACTION = 0.05
MAX_PER_AREA = 10


@dataclass(frozen=True, eq=False)
class ProbeTrace:
    fault_bus: int
    duration: float
    t_pf: float
    V: np.ndarray  # (n_steps + 1, n_buses), sampled every control interval from t = 0


@dataclass
class NeighborReport:
    area: int
    probes: list  # (fault bus, duration)
    violating: dict = field(default_factory=dict)  # foreign area -> [(bus, nadir)]
    selected: tuple = ()

    def to_dict(self) -> dict:
        return {
            "area": self.area,
            "probes": [[int(b), float(d)] for b, d in self.probes],
            "violating": {int(a): [{"bus": int(b), "nadir": round(float(n), 12)} for b, n in rows]
                          for a, rows in self.violating.items()},
            "selected": [int(b) for b in self.selected],
        }


def simulate_zero_control(model: GridModel, scenarios: list[FaultScenario]) -> np.ndarray:
    """Voltage traces (B, n_steps + 1, n_buses) of open-loop rollouts."""
    grid = BatchGrid(model, scenarios)
    n_steps = model.steps_per_episode(scenarios[0])
    out = np.empty((len(scenarios), n_steps + 1, model.n_buses))
    out[:, 0] = grid.V
    zero = np.zeros((len(scenarios), model.n_loads))
    for k in range(n_steps):
        grid.apply_actions(zero)
        grid.advance()
        out[:, k + 1] = grid.V
    return out


def probe_area(model: GridModel, area: int, durations=DEFAULT_PROBE_DURATIONS, t_fault: float = 1.0,
               episode_length: float = 10.0) -> list[ProbeTrace]:
    """One zero-control trace set per (controllable bus of ``area``, duration)."""
    topo = model.topology
    if area not in topo.areas:
        raise TopologyError(f"unknown area {area}")
    buses = [ld.bus for ld in topo.loads.get(area, ())]
    if not buses:
        raise TopologyError(f"area {area} has no controllable load bus to probe")
    combos = [(b, float(d)) for b in buses for d in durations]
    scenarios = [FaultScenario(b, d, t_fault=t_fault, episode_length=episode_length) for b, d in combos]
    traces = simulate_zero_control(model, scenarios)
    return [ProbeTrace(b, d, sc.t_pf, traces[i]) for i, ((b, d), sc) in enumerate(zip(combos, scenarios))]


def select_neighbors(traces: list[ProbeTrace], topology, area: int,
                     profile: RecoveryProfile = DEFAULT_PROFILE, nadir_threshold: float = NADIR_THRESHOLD,
                     dt: float = 0.1, small_fraction: float = SMALL_FRACTION,
                     max_per_area: int = MAX_PER_AREA) -> NeighborReport:
    report = NeighborReport(area, [(p.fault_bus, p.duration) for p in traces])
    selected = []
    for other in topology.area_ids:
        if other == area:
            continue
        rows = []
        for bus in topology.area_buses(other):
            j = topology.index(bus)
            checks = [check_profile_violation(p.V[:, j], p.t_pf, dt, profile) for p in traces]
            if any(c.violated for c in checks):
                rows.append((bus, min(c.nadir for c in checks)))
        report.violating[other] = rows
        tolerance = max(1, int(np.floor(small_fraction * len(topology.areas[other]))))
        if len(rows) <= tolerance:
            continue
        deep = sorted((n, b) for b, n in rows if n < nadir_threshold)
        selected.extend(b for _, b in deep[:max_per_area])
    report.selected = tuple(sorted(selected))
    return report


def discover_neighbors(model: GridModel, durations=DEFAULT_PROBE_DURATIONS, **kw) -> dict[int, NeighborReport]:
    topo = model.topology
    return {a: select_neighbors(probe_area(model, a, durations), topo, a, dt=model.params.dt_control, **kw)
            for a in topo.area_ids if topo.loads.get(a)}
