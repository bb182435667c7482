"""Multi-area voltage surrogate with stalling loads.

Per simulation substep, for bus j and controllable load k:

    V_j = 1 + offset_j - sum_k w_jk * sag_k * D_k * (1 + gain * s_k) - fault_j(t)
    ds_j/dt = k_stall * max(0, V_stall - V_j) * (1 - s_j)
              - k_rec * s_j * max(0, V_j - V_rec)

where ``offset_j = sum_k w_jk * sag_k`` puts every bus at exactly 1.0 p.u.
for full unstalled load and no fault, and
``fault_j(t) = depth * w_j,f / w_f,f`` on the window [t_fault, t_fault + duration),
so the faulted bus f itself drops by exactly ``depth``.
Between V_stall and V_rec neither term acts, so a stall caused by a fault can
persist after clearing until shedding lifts the voltage above V_rec.  Stall
states are integrated with explicit Euler at ``dt_sim``; actions are applied
once at the start of each ``dt_control`` interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .topology import GridTopology, TopologyError, build_coupling


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SurrogateParams:
    v_stall: float = 0.7
    v_rec: float = 0.9
    k_stall: float = 30.0
    k_rec: float = 1.2
    stall_load_gain: float = 2.5
    hop_decay: float = 0.45
    dt_sim: float = 0.01
    dt_control: float = 0.1
    action_eps: float = 1e-3

    def __post_init__(self):
        for name in ("k_stall", "k_rec", "stall_load_gain", "dt_sim", "dt_control", "action_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        ratio = self.dt_control / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("dt_control must be an integer multiple of dt_sim")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_control / self.dt_sim))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class FaultScenario:
    fault_bus: int | None
    duration: float = 0.0
    t_fault: float = 1.0
    depth: float = 0.9
    episode_length: float = 10.0
    name: str | None = None

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("fault duration must be >= 0")
        if self.episode_length <= 0:
            raise ValueError("episode length must be positive")

    @property
    def t_pf(self) -> float:
        return self.t_fault + self.duration

    @property
    def has_fault(self) -> bool:
        return self.fault_bus is not None and self.duration > 0

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if not self.has_fault:
            return "nofault"
        return f"bus{self.fault_bus}_{self.duration:g}s"

    def to_dict(self) -> dict:
        return {"fault_bus": self.fault_bus, "duration": self.duration, "t_fault": self.t_fault,
                "depth": self.depth, "episode_length": self.episode_length, "name": self.name}


@dataclass
class GridState:
    t: float
    V: np.ndarray
    D: np.ndarray
    s: np.ndarray
    fully_shed: np.ndarray
    shed: np.ndarray = field(default=None)  # p.u. shed per load in the last interval
    substep: int = 0

    def copy(self) -> "GridState":
        return GridState(self.t, self.V.copy(), self.D.copy(), self.s.copy(),
                         self.fully_shed.copy(), None if self.shed is None else self.shed.copy(),
                         self.substep)


class GridModel:
    """A topology compiled against surrogate parameters."""

    def __init__(self, topology: GridTopology, params: SurrogateParams | None = None):
        self.topology = topology
        self.params = params or SurrogateParams()
        self.w = build_coupling(topology, self.params.hop_decay)
        loads = topology.load_list
        self.load_idx = np.array([topology.index(ld.bus) for ld in loads], dtype=np.int64)
        self.demand = np.array([ld.demand for ld in loads], dtype=float)
        self.sag = np.array([ld.sag for ld in loads], dtype=float)
        self.w_load = np.ascontiguousarray(self.w[:, self.load_idx])
        self.offset = self.w_load @ self.sag

    @property
    def n_buses(self) -> int:
        return self.topology.n_buses

    @property
    def n_loads(self) -> int:
        return self.load_idx.shape[0]

    def steps_per_episode(self, scenario: FaultScenario) -> int:
        return int(round(scenario.episode_length / self.params.dt_control))

    def check_scenario(self, scenario: FaultScenario) -> None:
        if scenario.fault_bus is not None:
            try:
                self.topology.index(scenario.fault_bus)
            except TopologyError:
                raise TopologyError(f"scenario fault bus {scenario.fault_bus} is not in the grid") from None

    def fault_vector(self, scenario: FaultScenario) -> np.ndarray:
        if not scenario.has_fault:
            return np.zeros(self.n_buses)
        f = self.topology.index(scenario.fault_bus)
        return scenario.depth * self.w[:, f] / self.w[f, f]

    def fault_window(self, scenario: FaultScenario) -> tuple[int, int]:
        """Substep index range [start, end) during which the fault is applied."""
        if not scenario.has_fault:
            return 0, 0
        dt = self.params.dt_sim
        return int(round(scenario.t_fault / dt)), int(round(scenario.t_pf / dt))


@njit(cache=True, nogil=True)
def _voltage_row(b, n, V, s, D, w_load, sag, offset, load_idx, gain, fault_vec, f_start, f_end):
    active = f_start[b] <= n and n < f_end[b]
    n_bus = V.shape[1]
    n_load = D.shape[1]
    for j in range(n_bus):
        acc = 0.0
        for k in range(n_load):
            # deviation from full unstalled load, so the equilibrium is exactly 1.0
            acc += w_load[j, k] * sag[k] * (D[b, k] * (1.0 + gain * s[b, load_idx[k]]) - 1.0)
        v = 1.0 - acc
        if active:
            v -= fault_vec[b, j]
        V[b, j] = v


@njit(cache=True, nogil=True)
def integrate_kernel(V, s, D, w_load, sag, offset, load_idx, fault_vec, f_start, f_end, n0, n_sub,
                     dt, v_stall, v_rec, k_stall, k_rec, gain):
    """Advance every batch row by ``n_sub`` substeps from global substep ``n0``.

    ``V`` must hold the voltages at ``n0`` on entry and holds those at
    ``n0 + n_sub`` on exit.  Returns 0, or 1 if a stall state left [0, 1] or
    a voltage became non-finite.
    """
    n_batch = V.shape[0]
    n_bus = V.shape[1]
    for b in range(n_batch):
        for i in range(n_sub):
            for j in range(n_bus):
                v = V[b, j]
                sj = s[b, j]
                stall = v_stall - v
                if stall < 0.0:
                    stall = 0.0
                rec = v - v_rec
                if rec < 0.0:
                    rec = 0.0
                sj = sj + dt * (k_stall * stall * (1.0 - sj) - k_rec * sj * rec)
                if not (sj >= 0.0 and sj <= 1.0):
                    return 1
                s[b, j] = sj
            _voltage_row(b, n0 + i + 1, V, s, D, w_load, sag, offset, load_idx, gain, fault_vec,
                         f_start, f_end)
            for j in range(n_bus):
                if not np.isfinite(V[b, j]):
                    return 1
    return 0


@njit(cache=True, nogil=True)
def voltages_kernel(V, s, D, w_load, sag, offset, load_idx, fault_vec, f_start, f_end, n, gain):
    for b in range(V.shape[0]):
        _voltage_row(b, n, V, s, D, w_load, sag, offset, load_idx, gain, fault_vec, f_start, f_end)


class BatchGrid:
    """B independent copies of the grid sharing one time axis.

    All rollouts in a batch start at t = 0 and advance in lockstep; each can
    carry its own fault scenario.
    """

    def __init__(self, model: GridModel, scenarios: list[FaultScenario]):
        for sc in scenarios:
            model.check_scenario(sc)
        self.model = model
        self.scenarios = list(scenarios)
        b, p = len(scenarios), model.params
        self.fault_vec = np.array([model.fault_vector(sc) for sc in scenarios]).reshape(b, model.n_buses)
        windows = [model.fault_window(sc) for sc in scenarios]
        self.f_start = np.array([w[0] for w in windows], dtype=np.int64)
        self.f_end = np.array([w[1] for w in windows], dtype=np.int64)
        self.t_pf = np.array([sc.t_pf for sc in scenarios], dtype=float)
        self.n = 0
        self.s = np.zeros((b, model.n_buses))
        self.D = np.ones((b, model.n_loads))
        self.V = np.empty((b, model.n_buses))
        self._refresh_voltages()
        self._p = p

    @property
    def size(self) -> int:
        return len(self.scenarios)

    @property
    def t(self) -> float:
        return self.n * self.model.params.dt_sim

    def _refresh_voltages(self) -> None:
        m = self.model
        voltages_kernel(self.V, self.s, self.D, m.w_load, m.sag, m.offset, m.load_idx, self.fault_vec,
                        self.f_start, self.f_end, self.n, m.params.stall_load_gain)

    def apply_actions(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Shed load; returns (shed p.u. per load, per-load invalid-action flags)."""
        u = np.asarray(u, dtype=float)
        if u.shape != self.D.shape:
            raise ValueError(f"action shape {u.shape} does not match loads {self.D.shape}")
        if not np.all(np.isfinite(u)) or np.any(u < -0.2 - 1e-12) or np.any(u > 1e-12):
            raise ValueError("actions must lie in [-0.2, 0]")
        before = self.D
        invalid = (u < -self._p.action_eps) & (before <= 0.0)
        after = np.maximum(0.0, before + u)
        self.D = after
        self._refresh_voltages()
        return (before - after) * self.model.demand, invalid

    def advance(self) -> None:
        m, p = self.model, self._p
        code = integrate_kernel(self.V, self.s, self.D, m.w_load, m.sag, m.offset, m.load_idx,
                                self.fault_vec, self.f_start, self.f_end, self.n, p.substeps,
                                p.dt_sim, p.v_stall, p.v_rec, p.k_stall, p.k_rec, p.stall_load_gain)
        if code:
            raise SimulationError(f"integration left the valid state region near t={self.t:.2f}s")
        self.n += p.substeps


# -- single-rollout API -----------------------------------------------------

def reset(model: GridModel, scenario: FaultScenario) -> GridState:
    model.check_scenario(scenario)
    grid = BatchGrid(model, [scenario])
    return _state_of(grid, np.zeros(model.n_loads))


def _state_of(grid: BatchGrid, shed: np.ndarray) -> GridState:
    return GridState(t=grid.t, V=grid.V[0].copy(), D=grid.D[0].copy(), s=grid.s[0].copy(),
                     fully_shed=grid.D[0] <= 0.0, shed=shed, substep=grid.n)


def step(state: GridState, actions, scenario: FaultScenario, model: GridModel) -> tuple[GridState, int]:
    """Advance one control interval from ``state`` under per-load actions in [-0.2, 0]."""
    grid = BatchGrid(model, [scenario])
    grid.n = state.substep
    grid.s = state.s[None, :].copy()
    grid.D = state.D[None, :].copy()
    grid._refresh_voltages()
    shed, invalid = grid.apply_actions(np.asarray(actions, dtype=float)[None, :])
    grid.advance()
    return _state_of(grid, shed[0]), int(invalid[0].sum())


def with_params(model: GridModel, **changes) -> GridModel:
    return GridModel(model.topology, replace(model.params, **changes))
