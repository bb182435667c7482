"""Observation wiring: which voltages and load fractions an agent sees."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import GridTopology, TopologyError


@dataclass(frozen=True)
class AreaView:
    """Observation/actuation wiring for one area agent.

    Observation order: own-bus voltages, neighbor-bus voltages (both in
    topology order), then remaining load fractions of the area's loads.
    """

    area: int
    own_buses: tuple[int, ...]
    neighbor_buses: tuple[int, ...]
    load_buses: tuple[int, ...]
    own_idx: np.ndarray
    neighbor_idx: np.ndarray
    load_slots: np.ndarray

    @property
    def obs_dim(self) -> int:
        return len(self.own_buses) + len(self.neighbor_buses) + len(self.load_buses)

    @property
    def voltage_idx(self) -> np.ndarray:
        return np.concatenate([self.own_idx, self.neighbor_idx]).astype(np.int64)

    def gather_for(self, n_buses: int) -> np.ndarray:
        """Indices into the stacked [V, D] vector that produce this observation."""
        return np.concatenate([self.voltage_idx, n_buses + self.load_slots]).astype(np.int64)


def area_view(topology: GridTopology, area: int, neighbors=()) -> AreaView:
    if area not in topology.areas:
        raise TopologyError(f"unknown area {area}")
    own = topology.area_buses(area)
    nb_set = set(int(b) for b in neighbors)
    for b in nb_set:
        topology.index(b)
        if b in own:
            raise TopologyError(f"neighbor bus {b} belongs to area {area} itself")
    nb = [b for b in topology.buses if b in nb_set]
    loads = [ld.bus for ld in topology.loads.get(area, ())]
    return AreaView(
        area=area,
        own_buses=tuple(own),
        neighbor_buses=tuple(nb),
        load_buses=tuple(loads),
        own_idx=np.array([topology.index(b) for b in own], dtype=np.int64),
        neighbor_idx=np.array([topology.index(b) for b in nb], dtype=np.int64),
        load_slots=np.array(topology.load_slots(area), dtype=np.int64),
    )


def observe_area(state, view: AreaView) -> np.ndarray:
    V, D = np.asarray(state.V), np.asarray(state.D)
    return np.concatenate([V[..., view.own_idx], V[..., view.neighbor_idx], D[..., view.load_slots]],
                          axis=-1)


def observe_coordinator(state, topology: GridTopology) -> np.ndarray:
    """Per-area minimum bus voltage, in area-id order."""
    V = np.asarray(state.V)
    cols = []
    for area in topology.area_ids:
        idx = [topology.index(b) for b in topology.area_buses(area)]
        cols.append(V[..., idx].min(axis=-1))
    return np.stack(cols, axis=-1)
