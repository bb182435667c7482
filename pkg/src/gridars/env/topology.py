"""Grid topology files and the bus-to-bus coupling matrix."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class LoadBus:
    bus: int
    demand: float  # nominal demand, p.u.
    sag: float  # voltage sensitivity of this load (γ), p.u. per p.u. of loading


@dataclass(frozen=True, eq=False)
class GridTopology:
    """Buses, lines, area partition and controllable loads.

    Load order is area order, then the order listed per area; this is the
    order of the D vector and of every joint action vector.
    """

    name: str
    buses: tuple[int, ...]
    lines: tuple[tuple[int, int, float], ...]
    areas: dict[int, tuple[int, ...]]
    loads: dict[int, tuple[LoadBus, ...]]
    scenarios: dict = field(default_factory=dict)
    use_line_lengths: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(set(self.buses)) != len(self.buses):
            raise TopologyError("duplicate bus ids")
        known = set(self.buses)
        for a, b, w in self.lines:
            if a not in known or b not in known:
                raise TopologyError(f"line ({a}, {b}) references an unknown bus")
            if a == b:
                raise TopologyError(f"self-loop at bus {a}")
            if w <= 0:
                raise TopologyError(f"line ({a}, {b}) has non-positive weight {w}")
        seen: dict[int, int] = {}
        for area, members in self.areas.items():
            for bus in members:
                if bus not in known:
                    raise TopologyError(f"area {area} lists unknown bus {bus}")
                if bus in seen:
                    raise TopologyError(f"bus {bus} is in areas {seen[bus]} and {area}")
                seen[bus] = area
        missing = known - set(seen)
        if missing:
            raise TopologyError(f"buses {sorted(missing)} belong to no area")
        load_seen = set()
        for area, loads in self.loads.items():
            if area not in self.areas:
                raise TopologyError(f"loads listed for unknown area {area}")
            for ld in loads:
                if seen.get(ld.bus) != area:
                    raise TopologyError(f"load bus {ld.bus} is not a member of area {area}")
                if ld.bus in load_seen:
                    raise TopologyError(f"load bus {ld.bus} listed twice")
                if ld.demand <= 0 or ld.sag < 0:
                    raise TopologyError(f"load bus {ld.bus} needs demand > 0 and sag >= 0")
                load_seen.add(ld.bus)

    # -- lookups ------------------------------------------------------------
    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def area_ids(self) -> list[int]:
        return sorted(self.areas)

    def index(self, bus: int) -> int:
        try:
            return self._index[bus]
        except KeyError:
            raise TopologyError(f"unknown bus {bus}") from None

    @property
    def _index(self) -> dict[int, int]:
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {b: i for i, b in enumerate(self.buses)}
            object.__setattr__(self, "_index_cache", cache)
        return cache

    def area_of(self, bus: int) -> int:
        for area, members in self.areas.items():
            if bus in members:
                return area
        raise TopologyError(f"unknown bus {bus}")

    @property
    def load_list(self) -> list[LoadBus]:
        return [ld for a in self.area_ids for ld in self.loads.get(a, ())]

    @property
    def load_buses(self) -> list[int]:
        return [ld.bus for ld in self.load_list]

    def load_slots(self, area: int) -> list[int]:
        """Positions of an area's loads within the global load vector."""
        slots, pos = [], 0
        for a in self.area_ids:
            for _ in self.loads.get(a, ()):
                if a == area:
                    slots.append(pos)
                pos += 1
        return slots

    def area_buses(self, area: int) -> list[int]:
        """Area members in topology order."""
        members = set(self.areas[area])
        return [b for b in self.buses if b in members]

    def area_adjacency(self) -> dict[int, set[int]]:
        """Physically adjacent areas (joined by at least one line)."""
        adj = {a: set() for a in self.area_ids}
        for a, b, _ in self.lines:
            x, y = self.area_of(a), self.area_of(b)
            if x != y:
                adj[x].add(y)
                adj[y].add(x)
        return adj

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "buses": list(self.buses),
            "lines": [[a, b, w] for a, b, w in self.lines],
            "areas": {a: list(m) for a, m in self.areas.items()},
            "loads": {a: [{"bus": ld.bus, "demand": ld.demand, "sag": ld.sag} for ld in lds]
                      for a, lds in self.loads.items()},
            "scenarios": self.scenarios,
            "use_line_lengths": self.use_line_lengths,
        }


def topology_from_dict(d: dict) -> GridTopology:
    try:
        lines = []
        for entry in d.get("lines", []):
            if len(entry) == 2:
                lines.append((int(entry[0]), int(entry[1]), 1.0))
            else:
                lines.append((int(entry[0]), int(entry[1]), float(entry[2])))
        loads = {}
        for area, entries in (d.get("loads") or {}).items():
            loads[int(area)] = tuple(
                LoadBus(int(e["bus"]), float(e.get("demand", 1.0)), float(e.get("sag", 0.1)))
                for e in entries)
        return GridTopology(
            name=str(d.get("name", "grid")),
            buses=tuple(int(b) for b in d["buses"]),
            lines=tuple(lines),
            areas={int(a): tuple(int(b) for b in m) for a, m in d["areas"].items()},
            loads=loads,
            scenarios=d.get("scenarios") or {},
            use_line_lengths=bool(d.get("use_line_lengths", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, TopologyError):
            raise
        raise TopologyError(f"malformed topology: {exc!r}") from exc


def load_topology(path) -> GridTopology:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise TopologyError(f"cannot read topology file {path}: {exc}") from exc
    return topology_from_dict(data)


def hop_distances(topology: GridTopology, use_lengths: bool = False) -> np.ndarray:
    """All-pairs shortest-path distances; -1 where unreachable.

    Unweighted hop counts by default; with ``use_lengths`` each line's weight
    is its electrical length.
    """
    n = topology.n_buses
    graph = np.zeros((n, n))
    for a, b, w in topology.lines:
        i, j = topology.index(a), topology.index(b)
        length = w if use_lengths else 1.0
        if graph[i, j] == 0 or length < graph[i, j]:
            graph[i, j] = graph[j, i] = length
    dist = shortest_path(csr_matrix(graph), directed=False, unweighted=not use_lengths)
    return np.where(np.isinf(dist), -1.0, dist)


def build_coupling(topology: GridTopology, hop_decay: float, use_lengths: bool | None = None) -> np.ndarray:
    """Row-normalized influence matrix w_jk proportional to hop_decay ** dist(j, k).

    Every bus must reach all other buses of its own area; buses in mutually
    unreachable parts of the grid get zero coupling.
    """
    if not 0 < hop_decay < 1:
        raise TopologyError(f"hop decay must lie in (0, 1), got {hop_decay}")
    if use_lengths is None:
        use_lengths = topology.use_line_lengths
    dist = hop_distances(topology, use_lengths)
    for area in topology.area_ids:
        members = [topology.index(b) for b in topology.area_buses(area)]
        head = members[0]
        for m in members[1:]:
            if dist[head, m] < 0:
                raise TopologyError(
                    f"bus {topology.buses[m]} is disconnected from the rest of area {area}")
    w = np.where(dist >= 0, hop_decay ** np.maximum(dist, 0.0), 0.0)
    return w / w.sum(axis=1, keepdims=True)
