"""Coordinator over the area policies, trained against published snapshots.

The coordinator observes each area's minimum bus voltage and picks one of
a fixed list of area subsets every control step; only the chosen areas'
policies shed load.  All area policies keep stepping their LSTM state
every step so that a policy switched on mid-episode has seen the whole
trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import reward as rw
from .ars import ArsHyperParams, ArsLearner, ArsState, IterationRecord
from .dars import AreaTask, FaultSet, PolicySearchProblem, RolloutResult
from .engine import CoordinatorGate, CoordinatorReward, PolicyBank, continuous_actions, coordinator_obs, run_episodes
from .env.surrogate import FaultScenario, GridModel
from .policy import LstmPolicySpec, LstmState, RunningNormalizer, forward, init_params, normalize
from .snapshot import PolicySnapshot, SnapshotFeed

MODES = ("unrestricted", "restricted")


class SchedulingError(RuntimeError):
    pass


# -- action space ----------------------------------------------------------------

@dataclass(frozen=True)
class CoordinatorActionSpace:
    candidates: tuple  # area subsets, each a sorted tuple
    areas: tuple  # all area ids, in order
    mode: str = "unrestricted"
    adjacency: dict | None = None

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("coordinator action space is empty")
        if any(len(c) == 0 for c in self.candidates):
            raise ValueError("empty area subset in the action space")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("duplicate subsets in the action space")
        if self.mode not in MODES:
            raise ValueError(f"unknown action space mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def masks(self) -> np.ndarray:
        """(n_candidates, r) activation masks in area order."""
        return np.array([[a in c for a in self.areas] for c in self.candidates], dtype=bool)

    def allowed_for(self, fault_area: int | None) -> np.ndarray:
        """Candidates open to the coordinator for a fault in ``fault_area``."""
        if self.mode == "unrestricted" or fault_area is None:
            return np.ones(len(self), dtype=bool)
        ok = set(_restricted(fault_area, self.adjacency))
        return np.array([c in ok for c in self.candidates], dtype=bool)

    def to_dict(self) -> dict:
        return {"candidates": [list(c) for c in self.candidates], "areas": list(self.areas), "mode": self.mode,
                "adjacency": None if self.adjacency is None
                else {int(a): sorted(int(b) for b in n) for a, n in self.adjacency.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "CoordinatorActionSpace":
        adj = d.get("adjacency")
        return cls(tuple(tuple(int(a) for a in c) for c in d["candidates"]), tuple(int(a) for a in d["areas"]),
                   d.get("mode", "unrestricted"),
                   None if adj is None else {int(a): set(int(b) for b in n) for a, n in adj.items()})


def _ordered(subsets) -> list[tuple]:
    return sorted({tuple(sorted(s)) for s in subsets}, key=lambda s: (len(s), s))


def _restricted(area: int, adjacency: dict) -> list[tuple]:
    nbrs = sorted(adjacency.get(area, ()))
    return _ordered((area,) + extra for k in range(len(nbrs) + 1) for extra in combinations(nbrs, k))


def build_action_space(adjacency: dict, mode: str = "unrestricted", fault_area: int | None = None):
    """Restricted mode lists the subsets containing ``fault_area`` inside its
    physical neighbourhood; unrestricted mode lists every non-empty subset.
    Both are ordered by size, then lexicographically."""
    for a, nbrs in adjacency.items():
        for b in nbrs:
            if a not in adjacency.get(b, ()):
                raise ValueError(f"area adjacency is not symmetric ({a} -> {b})")
    areas = tuple(sorted(adjacency))
    if mode == "unrestricted":
        cands = _ordered(c for k in range(1, len(areas) + 1) for c in combinations(areas, k))
        return CoordinatorActionSpace(tuple(cands), areas, mode, adjacency)
    if mode != "restricted":
        raise ValueError(f"unknown action space mode {mode!r}")
    if fault_area is None:
        # the union over fault areas; rollouts mask the entries outside their own list
        cands = _ordered(c for a in areas for c in _restricted(a, adjacency))
        return CoordinatorActionSpace(tuple(cands), areas, mode, adjacency)
    if fault_area not in adjacency:
        raise ValueError(f"unknown fault area {fault_area}")
    return CoordinatorActionSpace(tuple(_restricted(fault_area, adjacency)), areas, mode, adjacency)


# -- one-step composition ------------------------------------------------------------

def field_of_vision(subset, snapshots: dict, states: dict, observations: dict, tasks: dict, n_loads: int):
    """Joint action over all loads for one control step.

    Every area with a snapshot advances its LSTM on its own observation;
    only areas in ``subset`` contribute actions, the rest get exactly 0.
    Returns (actions, new states).
    """
    missing = [a for a in subset if a not in snapshots]
    if missing:
        raise SchedulingError(f"no snapshot for selected areas {missing}")
    u = np.zeros(n_loads)
    new_states = {}
    for area, snap in snapshots.items():
        task = tasks[area]
        x = normalize(snap.normalizer, observations[area])
        raw, new_states[area] = forward(snap.spec, snap.theta, states[area], x)
        if area in subset:
            u[task.slots] = continuous_actions(raw, task.action_bias)
    return u, new_states


# -- coordinator task -----------------------------------------------------------------

@dataclass(eq=False)
class CoordinatorTask:
    model: GridModel
    lower: dict  # area -> AreaTask
    space: CoordinatorActionSpace
    coeffs: rw.RewardCoefficients
    mode: str = "per_step"  # or "event": one choice held from clearing on
    lstm_units: int = 16
    dense_units: int = 16

    def __post_init__(self):
        self.areas = list(self.space.areas)
        if sorted(self.lower) != self.areas:
            raise ValueError("coordinator needs one area task per area")
        self.observe = coordinator_obs(self.model)
        self.spec = LstmPolicySpec(len(self.areas), self.lstm_units, self.dense_units, "discrete", len(self.space))
        weights = np.array([self.coeffs.area_weight(a) for a in self.areas])
        self.reward = CoordinatorReward(self.observe, weights, self.coeffs)
        self.masks = self.space.masks

    def empty_normalizer(self) -> RunningNormalizer:
        return RunningNormalizer(self.spec.input_dim)

    def allowed(self, scenarios) -> np.ndarray | None:
        if self.space.mode == "unrestricted":
            return None
        topo = self.model.topology
        return np.stack([self.space.allowed_for(None if sc.fault_bus is None else topo.area_of(sc.fault_bus))
                         for sc in scenarios])

    def lower_banks(self, snapshots: dict, batch: int) -> list[PolicyBank]:
        missing = [a for a in self.areas if a not in snapshots]
        if missing:
            raise SchedulingError(f"no snapshot for areas {missing}")
        rows = np.zeros(batch, dtype=np.int64)
        return [self.lower[a].bank(snapshots[a].theta[None, :], rows, snapshots[a].normalizer) for a in self.areas]

    def run_batch(self, param_rows, rows, scenarios, normalizer, snapshots, track=False, record=False):
        bank = PolicyBank(self.spec, param_rows, rows, normalizer, self.observe)
        gate = CoordinatorGate(bank, self.masks, self.allowed(scenarios), self.mode)
        agents = self.lower_banks(snapshots, len(scenarios))
        return run_episodes(self.model, scenarios, agents, gate, self.reward, track=bank if track else None,
                            record=record, terminate=self.coeffs.terminate_on_penalty)


def coordinator_rollout(task: CoordinatorTask, theta, normalizer, snapshots: dict, scenario: FaultScenario,
                        record: bool = True) -> RolloutResult:
    out = task.run_batch(np.asarray(theta, float)[None, :], np.zeros(1, dtype=np.int64), [scenario], normalizer,
                         snapshots, track=True, record=record)
    obs = out.obs[:, 0][out.alive_obs[:, 0]]
    return RolloutResult(float(out.returns[0]), int(out.steps[0]), bool(out.penalized[0]),
                         float(out.shed_total[0]), bool(out.late_violation[0]), obs, out.traces)


def coordinator_problem(task: CoordinatorTask, scenarios, active, pool=None) -> PolicySearchProblem:
    """``active()`` returns the snapshot set in force for the current iteration."""
    def run_batch(param_rows, rows, scen, normalizer, track):
        return task.run_batch(param_rows, rows, scen, normalizer, active(), track=track)
    return PolicySearchProblem(scenarios, run_batch, pool)


# -- schedule ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ConcurrencySchedule:
    """CARS starts once every area has run ``h_l`` DARS iterations and
    re-reads the published snapshots every ``h_c`` of its own iterations."""

    h_l: int = 10
    h_c: int = 10

    def __post_init__(self):
        if self.h_l < 1 or self.h_c < 1:
            raise ValueError("H_l and H_c must be >= 1")

    def is_refresh(self, k: int) -> bool:
        return (k - 1) % self.h_c == 0

    def tick_of(self, k: int) -> int:
        """DARS iterations completed when CARS iteration k starts (lockstep)."""
        return self.h_l + k - 1


def snapshot_refresh(schedule: ConcurrencySchedule, feed: SnapshotFeed, k: int, active: dict | None,
                     max_tick: int | None = None) -> dict:
    """Snapshot set for CARS iteration k; changes only on refresh iterations."""
    if active is not None and not schedule.is_refresh(k):
        return active
    out = {}
    for area in feed.areas:
        current = None if active is None else active.get(area)
        if current is not None and current.converged:
            out[area] = current
            continue
        snap = feed.latest(area, max_tick)
        if snap is None:
            raise SchedulingError(f"area {area} has not published a snapshot yet")
        out[area] = snap
    return out


def representative_faults(fault_sets: dict, seed: int, per_area: int = 1) -> dict:
    """Seed-pinned random choice of ``per_area`` training buses in each area."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    out = {}
    for area in sorted(fault_sets):
        buses = list(fault_sets[area].fault_buses)
        pick = rng.choice(len(buses), size=min(per_area, len(buses)), replace=False)
        out[area] = tuple(buses[i] for i in sorted(pick))
    return out


def coordinator_scenarios(representatives: dict, durations, t_fault: float = 1.0,
                          episode_length: float = 10.0) -> list[FaultScenario]:
    buses = [b for a in sorted(representatives) for b in representatives[a]]
    return FaultSet(tuple(buses), tuple(durations), t_fault, episode_length).scenarios()


class CarsRun:
    """Coordinator learner; the caller installs the active snapshot set before each step."""

    def __init__(self, task: CoordinatorTask, hp: ArsHyperParams, scenarios, seed: int, schedule: ConcurrencySchedule,
                 learner_id: int = 0, pool=None, state: ArsState | None = None, curve=None, init_seed=None):
        self.task = task
        self.hp = hp
        self.scenarios = list(scenarios)
        self.seed = int(seed)
        self.schedule = schedule
        self.active: dict | None = None
        self.problem = coordinator_problem(task, self.scenarios, lambda: self.active, pool)
        if state is None:
            theta0 = init_params(task.spec, self.seed if init_seed is None else init_seed).values
            self.learner = ArsLearner.fresh(self.problem, hp, theta0, task.empty_normalizer(), self.seed, learner_id)
        else:
            self.learner = ArsLearner(self.problem, hp, state, self.seed, learner_id)
        self.curve: list[IterationRecord] = list(curve or [])

    @property
    def state(self) -> ArsState:
        return self.learner.state

    @property
    def done(self) -> bool:
        return self.learner.done

    @property
    def next_iteration(self) -> int:
        return self.state.iteration + 1

    def versions(self) -> dict:
        return {a: s.version for a, s in sorted((self.active or {}).items())}

    def step(self, active: dict) -> IterationRecord:
        self.active = dict(active)
        rec = self.learner.step()
        rec.extra["versions"] = self.versions()
        rec.extra["refresh"] = self.schedule.is_refresh(rec.iteration)
        self.curve.append(rec)
        return rec


def cars_train(task: CoordinatorTask, hp: ArsHyperParams, scenarios, seed: int, feed: SnapshotFeed,
               schedule: ConcurrencySchedule, pool=None) -> CarsRun:
    """Train against whatever the feed holds (the sequential variant when the
    feed already contains converged final snapshots)."""
    run = CarsRun(task, hp, scenarios, seed, schedule, pool=pool)
    active = None
    while not run.done:
        active = snapshot_refresh(schedule, feed, run.next_iteration, active)
        run.step(active)
    return run
