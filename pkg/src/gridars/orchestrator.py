"""Training runs, baselines, evaluation and the run directory.

Hierarchical runs execute r area learners plus one coordinator learner.
In deterministic mode they advance in lockstep ``ticks``: at tick t every
unfinished area completes its t-th iteration, then the coordinator runs
the iteration that would overlap area iteration t + 1, reading only
snapshots published at ticks <= t.  The event order is therefore a pure
function of the configuration.  Threaded mode runs the same learners on
real threads for wall-clock measurements.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ars import ArsHyperParams, ArsState, IterationRecord
from .cars import (CarsRun, ConcurrencySchedule, CoordinatorActionSpace, CoordinatorTask, SchedulingError,
                   build_action_space, coordinator_scenarios, representative_faults, snapshot_refresh)
from .config import RunConfig
from .dars import AreaTask, DarsRun, FaultSet
from .engine import AlwaysOn, CoordinatorGate, CoordinatorReward, FixedMask, PolicyBank, run_episodes
from .env.observe import area_view
from .env.surrogate import FaultScenario, GridModel, SurrogateParams
from .env.topology import load_topology, topology_from_dict
from .neighbors import discover_neighbors
from .policy import (CheckpointError, LstmPolicySpec, ParameterVector, RunningNormalizer, checkpoint_payload,
                     parse_checkpoint)
from .reward import RewardCoefficients
from .snapshot import PolicySnapshot, SnapshotFeed
from .workers import make_pool

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CRASH = 4
EXIT_EVAL = 5

MODES = ("hierarchical", "centralized", "decentralized", "evaluate")
STATE_FORMAT = "gridars-run-state"
BUNDLE_FORMAT = "gridars-bundle"
COORDINATOR_ID = 0


class RunError(RuntimeError):
    exit_code = EXIT_CRASH


class ResumeError(RunError):
    pass


class LearnerCrash(RunError):
    def __init__(self, message: str, resume_token: str | None = None):
        super().__init__(message)
        self.resume_token = resume_token


class EvaluationError(RunError):
    exit_code = EXIT_EVAL


# -- plan and experiment wiring -------------------------------------------------------

@dataclass
class RunPlan:
    mode: str
    config: RunConfig
    out_dir: Path
    workers: int = 1
    deterministic: bool = True
    resume: bool = False
    stop_after: int | None = None  # stop (and save state) after this many ticks
    allow_config_change: bool = False
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown run mode {self.mode!r}")
        if self.workers < 1:
            raise ValueError("worker budget must be >= 1")
        self.out_dir = Path(self.out_dir)
        if self.deterministic:
            self.workers = 1


def learner_ids(area_ids) -> dict[int, int]:
    """Area learners get 1..r; the coordinator is 0."""
    return {a: i + 1 for i, a in enumerate(sorted(area_ids))}


def init_seed(seed: int, learner: int) -> int:
    return int(seed) * 1009 + int(learner)


@dataclass(eq=False)
class Experiment:
    cfg: RunConfig
    model: GridModel
    neighbors: dict
    coeffs: RewardCoefficients
    tasks: dict = field(default_factory=dict)
    fault_sets: dict = field(default_factory=dict)

    @property
    def areas(self) -> list[int]:
        return sorted(self.tasks)

    def scenario(self, bus, duration) -> FaultScenario:
        ep = self.cfg.episode
        return FaultScenario(None if bus is None else int(bus), float(duration), ep.t_fault,
                             episode_length=ep.length)

    def representatives(self) -> dict:
        c = self.cfg.coordinator
        if c.representatives is not None:
            reps = {int(a): tuple(int(b) for b in buses) for a, buses in c.representatives.items()}
            for a, buses in reps.items():
                extra = set(buses) - set(self.fault_sets[a].fault_buses)
                if extra:
                    raise ValueError(f"coordinator representatives {sorted(extra)} are not in area {a}'s "
                                     "training set")
            return reps
        return representative_faults(self.fault_sets, self.cfg.seed, c.per_area)

    def coordinator_task(self) -> CoordinatorTask:
        c = self.cfg.coordinator
        space = build_action_space(self.model.topology.area_adjacency(), c.action_space)
        p = self.cfg.policy
        return CoordinatorTask(self.model, self.tasks, space, self.coeffs, c.mode, p.lstm_units, p.dense_units)

    def coordinator_scenarios(self) -> list[FaultScenario]:
        ep = self.cfg.episode
        return coordinator_scenarios(self.representatives(), self.cfg.coordinator.durations, ep.t_fault, ep.length)

    def centralized_task(self) -> AreaTask:
        p = self.cfg.policy
        views = [self.tasks[a].views[0] for a in self.areas]
        return AreaTask(self.model, views, self.coeffs, p.lstm_units, p.dense_units, p.action_bias)

    def centralized_fault_set(self) -> FaultSet:
        c = self.cfg.centralized
        buses = c.fault_buses or [b for a in self.areas for b in self.fault_sets[a].fault_buses]
        durations = c.durations or list(self.fault_sets[self.areas[0]].durations)
        ep = self.cfg.episode
        return FaultSet(tuple(buses), tuple(durations), ep.t_fault, ep.length)

    def scenario_set(self, name: str) -> list[FaultScenario]:
        """Named set from the config, a topology scenario name, or one of
        ``training`` / ``coordinator``."""
        if name == "training":
            return [sc for a in self.areas for sc in self.fault_sets[a].scenarios()]
        if name == "coordinator":
            return self.coordinator_scenarios()
        if name in self.cfg.evaluation:
            return [self._entry(e) for e in self.cfg.evaluation[name]]
        named = self.model.topology.scenarios
        if name in named:
            return [self._named(name, named[name])]
        raise KeyError(f"unknown scenario set {name!r}")

    def _entry(self, e) -> FaultScenario:
        sc = self.scenario(e.bus, e.duration)
        if e.name:
            sc = FaultScenario(sc.fault_bus, sc.duration, sc.t_fault, sc.depth, sc.episode_length, e.name)
        return sc

    def _named(self, name: str, d: dict) -> FaultScenario:
        ep = self.cfg.episode
        bus = d.get("fault_bus", d.get("bus"))
        return FaultScenario(bus, float(d.get("duration", 0.0)), float(d.get("t_fault", ep.t_fault)),
                             float(d.get("depth", 0.9)), float(d.get("episode_length", ep.length)), name)


def build_experiment(cfg: RunConfig, neighbors: dict | None = None) -> Experiment:
    topo = load_topology(cfg.topology_path)
    model = GridModel(topo, cfg.surrogate.params())
    coeffs = cfg.reward.coeffs()
    missing = sorted(set(topo.area_ids) - set(cfg.area_ids))
    unknown = sorted(set(cfg.area_ids) - set(topo.area_ids))
    if missing or unknown:
        raise ValueError(f"config areas do not match the topology (missing {missing}, unknown {unknown})")
    if neighbors is None:
        neighbors = resolve_neighbors(cfg, model)
    exp = Experiment(cfg, model, {int(a): tuple(v) for a, v in neighbors.items()}, coeffs)
    p = cfg.policy
    for a in cfg.area_ids:
        sec = cfg.area(a)
        for b in sec.fault_buses:
            if topo.area_of(b) != a:
                raise ValueError(f"area {a} fault bus {b} lies in area {topo.area_of(b)}")
        view = area_view(topo, a, exp.neighbors.get(a, ()))
        exp.tasks[a] = AreaTask(model, [view], coeffs, p.lstm_units, p.dense_units, p.action_bias)
        exp.fault_sets[a] = FaultSet(tuple(sec.fault_buses), tuple(sec.durations), cfg.episode.t_fault,
                                     cfg.episode.length)
    return exp


def resolve_neighbors(cfg: RunConfig, model: GridModel) -> dict:
    auto = [a.id for a in cfg.areas if a.neighbors == "auto"]
    found = {}
    if auto:
        n = cfg.neighbors
        reports = discover_neighbors(model, tuple(n.durations), nadir_threshold=n.nadir_threshold,
                                     small_fraction=n.small_fraction, max_per_area=n.max_per_area)
        found = {a: reports[a].selected if a in reports else () for a in auto}
    return {a.id: tuple(found[a.id]) if a.neighbors == "auto" else tuple(a.neighbors) for a in cfg.areas}


# -- output helpers ----------------------------------------------------------------------

def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else _num(v) for v in r])
    path.write_text(buf.getvalue())
    return path


def curve_rows(curve: list[IterationRecord], deterministic: bool, areas=None):
    header = ["iteration", "mean_return", "eval_return", "alpha", "nu"]
    if areas is not None:
        header += ["refresh"] + [f"snapshot_{a}" for a in areas]
    if not deterministic:
        header.append("wall_clock")
    rows = []
    for rec in curve:
        row = [rec.iteration, rec.mean_return, rec.eval_return, rec.alpha, rec.nu]
        if areas is not None:
            versions = rec.extra.get("versions", {})
            row += [bool(rec.extra.get("refresh", False))] + [versions.get(a, 0) for a in areas]
        if not deterministic:
            row.append(rec.busy_seconds)
        rows.append(row)
    return header, rows


def _write_json(path: Path, body) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(body, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def _signed(body: dict) -> dict:
    body = dict(body)
    body.pop("sha256", None)
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    body["sha256"] = hashlib.sha256(blob).hexdigest()
    return body


def _verify(body, fmt: str, what: str) -> dict:
    if not isinstance(body, dict) or body.get("format") != fmt:
        raise CheckpointError(f"{what} is not a {fmt} file")
    claimed = body.get("sha256")
    if claimed != _signed(body)["sha256"]:
        raise CheckpointError(f"{what}: checksum mismatch (corrupt file)")
    return body


def read_signed(path: Path, fmt: str) -> dict:
    try:
        body = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return _verify(body, fmt, str(path))


# -- timing ledger ---------------------------------------------------------------------------

@dataclass
class TimingLedger:
    """Busy time per learner and the composed wall-clock of a concurrent run.

    With every learner on its own workers, the hierarchical wall-clock is
    the areas' first H_l iterations (the slowest area) followed by the
    longest of the concurrent branches.
    """

    h_l: int = 0
    busy: dict = field(default_factory=dict)  # learner name -> per-iteration seconds
    rollouts: dict = field(default_factory=dict)
    env_steps: dict = field(default_factory=dict)
    measured_seconds: float = 0.0

    def add(self, name: str, rec: IterationRecord, state: ArsState) -> None:
        self.busy.setdefault(name, []).append(float(rec.busy_seconds))
        self.rollouts[name] = int(state.rollouts)
        self.env_steps[name] = int(state.env_steps)

    def area_names(self) -> list[str]:
        return [n for n in self.busy if n.startswith("area_")]

    def dars_prefix(self) -> float:
        return max((sum(self.busy[n][:self.h_l]) for n in self.area_names()), default=0.0)

    def concurrent_phase(self) -> float:
        branches = [sum(self.busy[n][self.h_l:]) for n in self.area_names()]
        branches.append(sum(self.busy.get("coordinator", [])))
        return max(branches)

    def hierarchical_total(self) -> float:
        return self.dars_prefix() + self.concurrent_phase()

    def serial_total(self) -> float:
        return sum(sum(v) for v in self.busy.values())

    def to_dict(self) -> dict:
        out = {"learners": {n: {"busy_seconds": sum(v), "iterations": len(v), "rollouts": self.rollouts.get(n, 0),
                                "env_steps": self.env_steps.get(n, 0)} for n, v in self.busy.items()},
               "serial_total": self.serial_total(), "measured_seconds": self.measured_seconds}
        if "coordinator" in self.busy:
            out.update(h_l=self.h_l, dars_prefix=self.dars_prefix(), concurrent_phase=self.concurrent_phase(),
                       hierarchical_total=self.hierarchical_total())
        return out

    @classmethod
    def from_dict(cls, d: dict, busy: dict) -> "TimingLedger":
        led = cls(int(d.get("h_l", 0)), {k: list(v) for k, v in busy.items()})
        for n, v in d.get("learners", {}).items():
            led.rollouts[n] = int(v["rollouts"])
            led.env_steps[n] = int(v["env_steps"])
        return led


# -- learner state (de)serialization ---------------------------------------------------------

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a).ravel()]


def state_to_json(st: ArsState) -> dict:
    return {"theta": _floats(st.theta), "alpha": st.alpha, "nu": st.nu, "iteration": st.iteration,
            "normalizer": None if st.normalizer is None else st.normalizer.to_json(),
            "env_steps": st.env_steps, "rollouts": st.rollouts}


def state_from_json(d: dict) -> ArsState:
    norm = None if d["normalizer"] is None else RunningNormalizer.from_json(d["normalizer"])
    return ArsState(np.array(d["theta"], float), float(d["alpha"]), float(d["nu"]), int(d["iteration"]), norm,
                    int(d["env_steps"]), int(d["rollouts"]))


def record_to_json(rec: IterationRecord) -> dict:
    return {"iteration": rec.iteration, "mean_return": rec.mean_return, "eval_return": rec.eval_return,
            "alpha": rec.alpha, "nu": rec.nu, "busy_seconds": rec.busy_seconds,
            "extra": {k: ({str(a): v for a, v in val.items()} if isinstance(val, dict) else val)
                      for k, val in rec.extra.items()}}


def record_from_json(d: dict) -> IterationRecord:
    extra = dict(d.get("extra", {}))
    if "versions" in extra:
        extra["versions"] = {int(a): int(v) for a, v in extra["versions"].items()}
    return IterationRecord(int(d["iteration"]), float(d["mean_return"]), float(d["eval_return"]),
                           float(d["alpha"]), float(d["nu"]), float(d["busy_seconds"]), extra)


def snapshot_to_json(s: PolicySnapshot) -> dict:
    return {"area": s.area, "version": s.version, "iteration": s.iteration, "theta": _floats(s.theta),
            "normalizer": s.normalizer.to_json(), "converged": s.converged, "tick": s.tick}


def snapshot_from_json(d: dict, spec: LstmPolicySpec) -> PolicySnapshot:
    return PolicySnapshot(int(d["area"]), int(d["version"]), int(d["iteration"]), spec, np.array(d["theta"], float),
                          RunningNormalizer.from_json(d["normalizer"]), bool(d["converged"]), int(d["tick"]))


def snapshot_checkpoint(s: PolicySnapshot, extra: dict | None = None) -> dict:
    meta = {"area": s.area, "version": s.version, "iteration": s.iteration, "converged": s.converged,
            "tick": s.tick}
    meta.update(extra or {})
    return checkpoint_payload(s.spec, ParameterVector(np.array(s.theta)), s.normalizer, meta)


def hyper_fingerprint(cfg: RunConfig) -> dict:
    """Everything that shapes a training trajectory (paths, output and worker settings excluded)."""
    d = cfg.to_dict()
    for k in ("output_dir", "workers", "evaluation", "deterministic"):
        d.pop(k, None)
    return d


def _diff_keys(a, b, prefix="") -> list[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for k in sorted(set(a) | set(b), key=str):
            out += _diff_keys(a.get(k), b.get(k), f"{prefix}{k}.")
        return out
    return [] if a == b else [prefix.rstrip(".")]


# -- hierarchical run ------------------------------------------------------------------------

class HierarchicalRun:
    """r area learners, their snapshot feed and the coordinator learner."""

    def __init__(self, exp: Experiment, plan: RunPlan, pool=None):
        self.exp = exp
        self.plan = plan
        cfg = exp.cfg
        self.pool = pool if pool is not None else make_pool(plan.workers)
        self.schedule = ConcurrencySchedule(cfg.schedule.h_l, cfg.schedule.h_c)
        self.ids = learner_ids(exp.areas)
        self.runs = {a: DarsRun(exp.tasks[a], cfg.area(a).ars.hyper(), exp.fault_sets[a], cfg.seed, self.ids[a],
                                self.schedule.h_l, self.pool, init_seed(cfg.seed, self.ids[a]))
                     for a in exp.areas}
        self.feed = SnapshotFeed(exp.areas)
        self.ctask = exp.coordinator_task()
        self.cscen = exp.coordinator_scenarios()
        self.cars = CarsRun(self.ctask, cfg.coordinator.ars.hyper(), self.cscen, cfg.seed, self.schedule,
                            COORDINATOR_ID, self.pool, init_seed=init_seed(cfg.seed, COORDINATOR_ID))
        self.active: dict | None = None
        self.tick = 0
        self.events: list[dict] = []
        self.ledger = TimingLedger(self.schedule.h_l)
        self._lock = threading.Lock()

    # -- events
    def log(self, kind: str, learner: str, iteration: int = 0, version: int = 0, tick: int | None = None,
            detail: str = "") -> None:
        with self._lock:
            self.events.append({"seq": len(self.events) + 1, "tick": self.tick if tick is None else tick,
                                "kind": kind, "learner": learner, "iteration": iteration, "version": version,
                                "detail": detail})

    @property
    def done(self) -> bool:
        return self.cars.done and all(r.done for r in self.runs.values())

    def _publish(self, area: int, tick: int) -> None:
        snap = self.runs[area].snapshot(tick)
        self.feed.publish(snap)
        self.log("publish", f"area_{area}", snap.iteration, snap.version, tick)

    def _dars_step(self, area: int, tick: int) -> None:
        run = self.runs[area]
        rec, due = run.step()
        self.ledger.add(f"area_{area}", rec, run.state)
        self.log("dars_iteration", f"area_{area}", rec.iteration, tick=tick)
        if due:
            self._publish(area, tick)

    def _cars_step(self, max_tick: int | None) -> None:
        k = self.cars.next_iteration
        if k == 1:
            if not self.feed.all_published(max_tick):
                raise SchedulingError("coordinator started before every area published")
            self.log("cars_start", "coordinator", 1)
        refresh = self.schedule.is_refresh(k)
        self.active = snapshot_refresh(self.schedule, self.feed, k, self.active, max_tick)
        if refresh:
            versions = ";".join(f"{a}:{s.version}" for a, s in sorted(self.active.items()))
            self.log("cars_refresh", "coordinator", k, detail=versions)
        rec = self.cars.step(self.active)
        self.ledger.add("coordinator", rec, self.cars.state)
        self.log("cars_iteration", "coordinator", rec.iteration)

    def _cars_ready(self, tick: int) -> bool:
        if self.cars.done:
            return False
        if self.cars.state.iteration > 0:
            return True
        # first wave: every area has finished H_l iterations (or all of its iterations)
        return self.feed.all_published(tick) and all(
            r.state.iteration >= min(self.schedule.h_l, r.hp.max_iters) for r in self.runs.values())

    def advance(self) -> None:
        """One lockstep tick."""
        t = self.tick + 1
        for a in self.exp.areas:
            if not self.runs[a].done:
                self._dars_step(a, t)
        self.tick = t
        if self._cars_ready(t):
            self._cars_step(t)
        elif not self.cars.done and all(r.done for r in self.runs.values()) and not self.feed.all_published(t):
            raise SchedulingError("areas finished without publishing snapshots")

    def run_lockstep(self, stop_after: int | None = None, on_tick=None) -> bool:
        """Returns True when the run completed, False when stopped early."""
        while not self.done:
            if stop_after is not None and self.tick >= stop_after:
                return False
            self.advance()
            if on_tick is not None:
                on_tick(self)
        return True

    def run_threaded(self) -> None:
        """Every learner on its own thread; the coordinator reads the feed live."""
        cancel = threading.Event()
        errors: list[BaseException] = []

        def area_loop(a):
            try:
                while not self.runs[a].done and not cancel.is_set():
                    self._dars_step(a, self.runs[a].state.iteration + 1)
            except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
                errors.append(exc)
                cancel.set()

        def cars_loop():
            try:
                while not self.feed.all_published() and not cancel.is_set():
                    if all(r.done for r in self.runs.values()) and not self.feed.all_published():
                        raise SchedulingError("areas finished without publishing snapshots")
                    time.sleep(0.001)
                while not self.cars.done and not cancel.is_set():
                    self._cars_step(None)
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)
                cancel.set()

        threads = [threading.Thread(target=area_loop, args=(a,)) for a in self.exp.areas]
        threads.append(threading.Thread(target=cars_loop))
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        self.tick = max(r.state.iteration for r in self.runs.values())
        if errors:
            raise errors[0]

    # -- persistence
    def state_json(self) -> dict:
        return _signed({
            "format": STATE_FORMAT,
            "layout_version": 1,
            "mode": "hierarchical",
            "fingerprint": hyper_fingerprint(self.exp.cfg),
            "neighbors": {str(a): list(v) for a, v in self.exp.neighbors.items()},
            "tick": self.tick,
            "events": self.events,
            "areas": {str(a): {"state": state_to_json(r.state), "curve": [record_to_json(x) for x in r.curve],
                               "published": r.published,
                               "feed": [snapshot_to_json(s) for s in self.feed.history(a)]}
                      for a, r in self.runs.items()},
            "coordinator": {"state": state_to_json(self.cars.state),
                            "curve": [record_to_json(x) for x in self.cars.curve],
                            "active": None if self.active is None
                            else {str(a): s.version for a, s in self.active.items()}},
            "ledger": self.ledger.to_dict(),
            "busy": self.ledger.busy,
        })

    def restore(self, body: dict) -> None:
        cfg = self.exp.cfg
        self.tick = int(body["tick"])
        self.events = list(body["events"])
        for a in self.exp.areas:
            d = body["areas"][str(a)]
            task = self.exp.tasks[a]
            self.runs[a] = DarsRun(task, cfg.area(a).ars.hyper(), self.exp.fault_sets[a], cfg.seed, self.ids[a],
                                   self.schedule.h_l, self.pool, state=state_from_json(d["state"]),
                                   curve=[record_from_json(x) for x in d["curve"]], published=int(d["published"]))
            for s in d["feed"]:
                self.feed.publish(snapshot_from_json(s, task.spec))
        c = body["coordinator"]
        self.cars = CarsRun(self.ctask, cfg.coordinator.ars.hyper(), self.cscen, cfg.seed, self.schedule,
                            COORDINATOR_ID, self.pool, state=state_from_json(c["state"]),
                            curve=[record_from_json(x) for x in c["curve"]])
        if c["active"] is not None:
            self.active = {}
            for a, v in c["active"].items():
                match = [s for s in self.feed.history(int(a)) if s.version == int(v)]
                if not match:
                    raise CheckpointError(f"run state references unknown snapshot {a}:{v}")
                self.active[int(a)] = match[0]
        self.ledger = TimingLedger.from_dict(body["ledger"], body["busy"])
        self.ledger.h_l = self.schedule.h_l

    def final_snapshots(self) -> dict:
        # an area always publishes on its last iteration
        return {a: self.feed.latest(a) for a in self.exp.areas}


def schedule_violations(events: list[dict], h_l: int, h_c: int) -> list[str]:
    """Check an event log against the concurrency contract.

    CARS iteration 1 must follow a version-1 publication of every area, each
    made at DARS iteration H_l (or earlier if that area finished sooner), and
    snapshot refreshes must happen exactly at CARS iterations 1 (mod H_c).
    Returns human-readable problems; empty when the log conforms.
    """
    problems = []
    areas = sorted({e["learner"] for e in events if e["learner"].startswith("area_")})
    first_pub = {}
    start = None
    for e in events:
        if e["kind"] == "publish" and e["learner"] not in first_pub:
            first_pub[e["learner"]] = e
        if e["kind"] == "cars_start" and start is None:
            start = e
    if start is None:
        return ["coordinator never started"]
    for a in areas:
        pub = first_pub.get(a)
        if pub is None or pub["seq"] > start["seq"]:
            problems.append(f"{a} had not published version 1 before CARS iteration 1")
        elif int(pub["version"]) != 1:
            problems.append(f"{a} first publication has version {pub['version']}")
        elif int(pub["iteration"]) > h_l:
            problems.append(f"{a} first published at iteration {pub['iteration']} > H_l={h_l}")
    refreshed = [int(e["iteration"]) for e in events if e["kind"] == "cars_refresh"]
    iterations = [int(e["iteration"]) for e in events if e["kind"] == "cars_iteration"]
    expected = [k for k in iterations if (k - 1) % h_c == 0]
    if refreshed != expected:
        problems.append(f"refreshes at CARS iterations {refreshed}, expected {expected}")
    for e in events:
        if e["kind"] == "cars_refresh":
            seen = {f"area_{a}": int(v) for a, v in (x.split(":") for x in e["detail"].split(";") if x)}
            for a, v in seen.items():
                pubs = [p for p in events if p["kind"] == "publish" and p["learner"] == a
                        and int(p["version"]) == v]
                if not pubs or pubs[0]["seq"] > e["seq"]:
                    problems.append(f"refresh at CARS iteration {e['iteration']} used unpublished {a} v{v}")
    return problems


# -- run directory ---------------------------------------------------------------------------

class RunDirectory:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def state_file(self) -> Path:
        return self.path("run_state.json")

    @property
    def bundle_file(self) -> Path:
        return self.path("bundle.json")

    def echo_config(self, cfg: RunConfig, neighbors: dict) -> None:
        body = cfg.to_dict()
        for area in body["areas"]:
            area["neighbors"] = list(neighbors.get(area["id"], ()))
        self.path("config.yaml").parent.mkdir(parents=True, exist_ok=True)
        self.path("config.yaml").write_text(yaml.safe_dump(body, sort_keys=False))


def _check_resume(body: dict, cfg: RunConfig, allow: bool) -> None:
    if body.get("layout_version") != 1:
        raise ResumeError(f"run state layout_version {body.get('layout_version')} is not supported (expected 1)")
    changed = _diff_keys(body["fingerprint"], hyper_fingerprint(cfg))
    if changed and not allow:
        raise ResumeError("configuration changed since the run started: " + ", ".join(changed)
                          + " (pass the override flag to resume anyway)")


def _write_curves(rd: RunDirectory, run: HierarchicalRun, deterministic: bool) -> None:
    for a, r in run.runs.items():
        h, rows = curve_rows(r.curve, deterministic)
        write_csv(rd.path("curves", f"area_{a}.csv"), h, rows)
    h, rows = curve_rows(run.cars.curve, deterministic, run.exp.areas)
    write_csv(rd.path("curves", "coordinator.csv"), h, rows)
    keys = ["seq", "tick", "kind", "learner", "iteration", "version", "detail"]
    write_csv(rd.path("events.csv"), keys, ([str(e[k]) for k in keys] for e in run.events))


def run_hierarchical(plan: RunPlan, exp: Experiment | None = None, on_tick=None) -> HierarchicalRun:
    cfg = plan.config
    rd = RunDirectory(plan.out_dir)
    body = None
    if plan.resume:
        if not rd.state_file.exists():
            raise ResumeError(f"nothing to resume in {rd.root}")
        body = read_signed(rd.state_file, STATE_FORMAT)
        _check_resume(body, cfg, plan.allow_config_change)
        if exp is None:
            exp = build_experiment(cfg, {int(a): tuple(v) for a, v in body["neighbors"].items()})
    if exp is None:
        exp = build_experiment(cfg)
    rd.echo_config(cfg, exp.neighbors)
    run = HierarchicalRun(exp, plan)
    if body is not None:
        run.restore(body)
    t0 = time.perf_counter()

    def checkpoint(r):
        if r.tick % plan.checkpoint_every == 0:
            _write_snapshots(rd, r)
            _write_json(rd.state_file, r.state_json())
        if on_tick is not None:
            on_tick(r)

    try:
        if plan.deterministic:
            finished = run.run_lockstep(plan.stop_after, checkpoint)
        else:
            if plan.stop_after is not None or plan.resume:
                raise RunError("stop/resume needs deterministic mode")
            run.run_threaded()
            finished = True
    except (SchedulingError, RunError):
        raise
    except Exception as exc:
        # the last saved state is the resume point; the failed tick is discarded
        token = str(rd.state_file) if plan.deterministic and rd.state_file.exists() else None
        raise LearnerCrash(f"learner crashed: {exc!r}", token) from exc
    finally:
        run.pool.close()
    run.ledger.measured_seconds += time.perf_counter() - t0
    if plan.deterministic:
        _write_json(rd.state_file, run.state_json())
    _write_curves(rd, run, plan.deterministic)
    if not finished:
        return run
    write_hierarchical_outputs(rd, run)
    return run


def _write_snapshots(rd: RunDirectory, run: HierarchicalRun) -> None:
    for a in run.exp.areas:
        for s in run.feed.history(a):
            path = rd.path("checkpoints", "snapshots", f"area_{a}_v{s.version:04d}.json")
            if not path.exists():
                _write_json(path, snapshot_checkpoint(s))


def write_hierarchical_outputs(rd: RunDirectory, run: HierarchicalRun) -> None:
    exp = run.exp
    finals = run.final_snapshots()
    for a, s in finals.items():
        _write_json(rd.path("checkpoints", f"area_{a}.json"), snapshot_checkpoint(s))
    _write_snapshots(rd, run)
    cst = run.cars.state
    coord = checkpoint_payload(run.ctask.spec, ParameterVector(cst.theta), cst.normalizer,
                               {"iteration": cst.iteration})
    _write_json(rd.path("checkpoints", "coordinator.json"), coord)
    bundle = make_bundle(exp, finals, run.ctask, coord)
    _write_json(rd.bundle_file, bundle)
    _write_json(rd.path("ledger.json"), run.ledger.to_dict())


# -- bundles -----------------------------------------------------------------------------------

def environment_json(exp: Experiment) -> dict:
    cfg = exp.cfg
    return {"topology": exp.model.topology.to_dict(), "surrogate": exp.model.params.to_dict(),
            "reward": exp.coeffs.to_dict(), "episode": {"t_fault": cfg.episode.t_fault, "length": cfg.episode.length},
            "policy": cfg.policy.model_dump()}


def make_bundle(exp: Experiment, finals: dict, ctask: CoordinatorTask | None, coord_payload: dict | None,
                centralized: dict | None = None) -> dict:
    body = {"format": BUNDLE_FORMAT, "layout_version": 1, "environment": environment_json(exp),
            "neighbors": {str(a): list(v) for a, v in exp.neighbors.items()},
            "lower": {str(a): snapshot_checkpoint(s) for a, s in (finals or {}).items()}}
    if ctask is not None:
        body["coordinator"] = {"policy": coord_payload, "action_space": ctask.space.to_dict(), "mode": ctask.mode}
    if centralized is not None:
        body["centralized"] = centralized
    return _signed(body)


@dataclass(eq=False)
class Bundle:
    model: GridModel
    coeffs: RewardCoefficients
    tasks: dict  # area -> AreaTask
    snapshots: dict  # area -> PolicySnapshot
    episode: dict
    coordinator: tuple | None = None  # (CoordinatorTask, theta, normalizer)
    centralized: tuple | None = None  # (AreaTask, theta, normalizer)

    @property
    def areas(self) -> list[int]:
        return sorted(self.tasks)

    def scenario(self, bus, duration, name=None) -> FaultScenario:
        return FaultScenario(None if bus is None else int(bus), float(duration), self.episode["t_fault"],
                             episode_length=self.episode["length"], name=name)


def load_bundle(path) -> Bundle:
    body = read_signed(Path(path), BUNDLE_FORMAT)
    if body.get("layout_version") != 1:
        raise CheckpointError(f"bundle layout_version {body.get('layout_version')} is not supported (expected 1)")
    env = body["environment"]
    topo = topology_from_dict(env["topology"])
    model = GridModel(topo, SurrogateParams(**env["surrogate"]))
    r = dict(env["reward"])
    r["area_weights"] = {int(k): float(v) for k, v in r.get("area_weights", {}).items()}
    coeffs = RewardCoefficients(**r)
    pol = env["policy"]
    tasks, snaps = {}, {}
    for a_str, nbrs in body["neighbors"].items():
        a = int(a_str)
        tasks[a] = AreaTask(model, [area_view(topo, a, tuple(nbrs))], coeffs, pol["lstm_units"], pol["dense_units"],
                            pol["action_bias"])
        if a_str in body["lower"]:
            spec, params, norm, meta = parse_checkpoint(body["lower"][a_str])
            if spec != tasks[a].spec:
                raise CheckpointError(f"area {a} checkpoint does not match its observation layout")
            snaps[a] = PolicySnapshot(a, int(meta["version"]), int(meta["iteration"]), spec, params.values, norm,
                                      bool(meta["converged"]), int(meta["tick"]))
    out = Bundle(model, coeffs, tasks, snaps, env["episode"])
    if "coordinator" in body:
        c = body["coordinator"]
        space = CoordinatorActionSpace.from_dict(c["action_space"])
        ctask = CoordinatorTask(model, tasks, space, coeffs, c["mode"], pol["lstm_units"], pol["dense_units"])
        spec, params, norm, _ = parse_checkpoint(c["policy"])
        if spec != ctask.spec:
            raise CheckpointError("coordinator checkpoint does not match the action space")
        out.coordinator = (ctask, params.values, norm)
    if "centralized" in body:
        views = [tasks[a].views[0] for a in sorted(tasks)]
        ctask = AreaTask(model, views, coeffs, pol["lstm_units"], pol["dense_units"], pol["action_bias"])
        spec, params, norm, _ = parse_checkpoint(body["centralized"])
        if spec != ctask.spec:
            raise CheckpointError("centralized checkpoint does not match the observation layout")
        out.centralized = (ctask, params.values, norm)
    return out


# -- evaluation ----------------------------------------------------------------------------------

EVAL_POLICIES = ("hierarchical", "decentralized", "all_areas", "centralized", "none")
SUMMARY_HEADER = ["scenario", "fault_bus", "duration", "return", "penalized", "late_violation",
                  "profile_violation", "shed_total", "nadir", "steps"]


@dataclass
class EvalReport:
    policy: str
    rows: list  # dicts with SUMMARY_HEADER keys
    traces: dict = field(default_factory=dict)  # scenario label -> (t, V, D, U)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def cleared(self) -> np.ndarray:
        return ~self.column("late_violation").astype(bool)


def check_scenarios(model: GridModel, scenarios) -> None:
    for sc in scenarios:
        try:
            model.check_scenario(sc)
        except (ValueError, KeyError) as exc:
            raise EvaluationError(f"scenario {sc.label}: {exc}") from exc


def _lower_banks(bundle: Bundle, batch: int) -> list[PolicyBank]:
    missing = [a for a in bundle.areas if a not in bundle.snapshots]
    if missing:
        raise EvaluationError(f"bundle has no policy for areas {missing}")
    rows = np.zeros(batch, dtype=np.int64)
    return [bundle.tasks[a].bank(bundle.snapshots[a].theta[None, :], rows, bundle.snapshots[a].normalizer)
            for a in bundle.areas]


def _fault_area_mask(bundle: Bundle, scenarios) -> np.ndarray:
    topo = bundle.model.topology
    mask = np.zeros((len(scenarios), len(bundle.areas)), dtype=bool)
    for i, sc in enumerate(scenarios):
        if sc.fault_bus is not None:
            mask[i, bundle.areas.index(topo.area_of(sc.fault_bus))] = True
    return mask


def _system_reward(bundle: Bundle):
    from .engine import coordinator_obs
    obs = coordinator_obs(bundle.model)
    weights = np.array([bundle.coeffs.area_weight(a) for a in bundle.areas])
    return CoordinatorReward(obs, weights, bundle.coeffs)


def evaluate(bundle: Bundle, scenarios: list[FaultScenario], policy: str = "hierarchical",
             record: bool = True) -> EvalReport:
    """Closed-loop evaluation.  Returns use the system-level coordinator reward
    for every policy so that they are comparable; the hierarchical policy on
    the coordinator's training scenarios reproduces its training returns."""
    if policy not in EVAL_POLICIES:
        raise EvaluationError(f"unknown evaluation policy {policy!r}")
    scenarios = list(scenarios)
    if not scenarios:
        raise EvaluationError("empty scenario set")
    check_scenarios(bundle.model, scenarios)
    by_len: dict = {}
    for i, sc in enumerate(scenarios):
        by_len.setdefault(sc.episode_length, []).append(i)
    rows: list = [None] * len(scenarios)
    traces = {}
    for idx in by_len.values():
        group = [scenarios[i] for i in idx]
        out = _evaluate_group(bundle, group, policy, record)
        for j, i in enumerate(idx):
            sc = scenarios[i]
            rows[i] = {"scenario": sc.label, "fault_bus": "" if sc.fault_bus is None else sc.fault_bus,
                       "duration": sc.duration, "return": float(out.returns[j]),
                       "penalized": bool(out.penalized[j]), "late_violation": bool(out.late_violation[j]),
                       "profile_violation": bool(out.profile_violation[j]), "shed_total": float(out.shed_total[j]),
                       "nadir": float(out.nadir[j]), "steps": int(out.steps[j])}
            if record:
                tr = out.traces
                traces[sc.label] = (tr["t"], tr["V"][:, j], tr["D"][:, j], tr["U"][:, j],
                                    tr["choice"][:, j])
    return EvalReport(policy, rows, traces)


def _evaluate_group(bundle: Bundle, scenarios, policy: str, record: bool):
    b = len(scenarios)
    terminate = bundle.coeffs.terminate_on_penalty
    if policy == "hierarchical":
        if bundle.coordinator is None:
            raise EvaluationError("bundle has no coordinator")
        ctask, theta, norm = bundle.coordinator
        return ctask.run_batch(theta[None, :], np.zeros(b, dtype=np.int64), scenarios, norm, bundle.snapshots,
                               record=record)
    if policy == "centralized":
        if bundle.centralized is None:
            raise EvaluationError("bundle has no centralized policy")
        task, theta, norm = bundle.centralized
        bank = task.bank(theta[None, :], np.zeros(b, dtype=np.int64), norm)
        return run_episodes(bundle.model, scenarios, [bank], AlwaysOn(), _system_reward(bundle), record=record,
                            terminate=terminate)
    if policy == "none":
        return run_episodes(bundle.model, scenarios, [], AlwaysOn(), _system_reward(bundle), record=record,
                            terminate=terminate)
    agents = _lower_banks(bundle, b)
    gate = FixedMask(_fault_area_mask(bundle, scenarios)) if policy == "decentralized" else AlwaysOn()
    return run_episodes(bundle.model, scenarios, agents, gate, _system_reward(bundle), record=record,
                        terminate=terminate)


def write_report(report: EvalReport, out_dir: Path, name: str, bundle: Bundle | None = None) -> Path:
    out_dir = Path(out_dir)
    path = write_csv(out_dir / f"{name}_summary.csv", SUMMARY_HEADER,
                     ([str(r[k]) if isinstance(r[k], str) else r[k] for k in SUMMARY_HEADER] for r in report.rows))
    if report.traces and bundle is not None:
        for label, tr in report.traces.items():
            write_trace(out_dir / f"{name}_traces" / f"{label}.csv", bundle.model, *tr)
    return path


def write_trace(path: Path, model: GridModel, t, V, D, U, choice=None) -> Path:
    """Long format: one row per (time, bus); D and action are blank at buses without load."""
    topo = model.topology
    slot = {ld.bus: i for i, ld in enumerate(topo.load_list)}
    n_steps = U.shape[0]
    rows = []
    for k in range(len(t)):
        for j, bus in enumerate(topo.buses):
            i = slot.get(bus)
            d = "" if i is None else D[k, i]
            u = "" if i is None or k >= n_steps else U[k, i]
            rows.append([t[k], bus, V[k, j], d, u])
    return write_csv(path, ["time", "bus", "V", "D", "action"], rows)


def run_evaluate(bundle_path, scenarios, out_dir, name: str = "eval", policy: str = "hierarchical") -> EvalReport:
    try:
        bundle = load_bundle(bundle_path)
    except CheckpointError as exc:
        raise EvaluationError(str(exc)) from exc
    if callable(scenarios):
        scenarios = scenarios(bundle)
    report = evaluate(bundle, scenarios, policy)
    write_report(report, out_dir, name, bundle)
    return report


def run_decentralized_only(bundle_path, scenarios, out_dir, name: str = "decentralized") -> EvalReport:
    """Only the fault area's own policy acts; no coordinator."""
    return run_evaluate(bundle_path, scenarios, out_dir, name, "decentralized")


# -- centralized baseline ---------------------------------------------------------------------------

@dataclass
class CentralizedResult:
    run: DarsRun
    ledger: TimingLedger
    bundle_path: Path


def run_centralized_baseline(plan: RunPlan, exp: Experiment | None = None) -> CentralizedResult:
    """One learner over every area's observation and every load, reward summed over areas."""
    cfg = plan.config
    exp = exp or build_experiment(cfg)
    rd = RunDirectory(plan.out_dir)
    rd.echo_config(cfg, exp.neighbors)
    task = exp.centralized_task()
    fs = exp.centralized_fault_set()
    lid = learner_ids(exp.areas)[exp.areas[0]]
    pool = make_pool(plan.workers)
    run = DarsRun(task, cfg.centralized.ars.hyper(), fs, cfg.seed, lid, cfg.schedule.h_l, pool,
                  init_seed(cfg.seed, lid))
    ledger = TimingLedger()
    t0 = time.perf_counter()
    try:
        while not run.done:
            rec, _ = run.step()
            ledger.add("centralized", rec, run.state)
    except Exception as exc:
        raise LearnerCrash(f"centralized learner crashed: {exc!r}") from exc
    finally:
        pool.close()
    ledger.measured_seconds = time.perf_counter() - t0
    h, rows = curve_rows(run.curve, plan.deterministic)
    write_csv(rd.path("curves", "centralized.csv"), h, rows)
    st = run.state
    payload = checkpoint_payload(task.spec, ParameterVector(st.theta), st.normalizer, {"iteration": st.iteration})
    _write_json(rd.path("checkpoints", "centralized.json"), payload)
    bundle = make_bundle(exp, {}, None, None, centralized=payload)
    _write_json(rd.bundle_file, bundle)
    _write_json(rd.path("ledger.json"), ledger.to_dict())
    return CentralizedResult(run, ledger, rd.bundle_file)


# -- sequential coordinator variant --------------------------------------------------------------------

def run_sequential_coordinator(exp: Experiment, finals: dict, plan: RunPlan, name: str = "coordinator_sequential"):
    """Coordinator trained only after every area has converged, on the same
    iteration budget and seed as the concurrent one."""
    cfg = exp.cfg
    schedule = ConcurrencySchedule(cfg.schedule.h_l, cfg.schedule.h_c)
    feed = SnapshotFeed(exp.areas)
    for a, s in finals.items():
        feed.publish(PolicySnapshot(a, s.version, s.iteration, s.spec, s.theta, s.normalizer, True, 0))
    ctask = exp.coordinator_task()
    pool = make_pool(plan.workers)
    run = CarsRun(ctask, cfg.coordinator.ars.hyper(), exp.coordinator_scenarios(), cfg.seed, schedule,
                  COORDINATOR_ID, pool, init_seed=init_seed(cfg.seed, COORDINATOR_ID))
    active = None
    try:
        while not run.done:
            active = snapshot_refresh(schedule, feed, run.next_iteration, active)
            run.step(active)
    finally:
        pool.close()
    h, rows = curve_rows(run.curve, plan.deterministic, exp.areas)
    write_csv(RunDirectory(plan.out_dir).path("curves", f"{name}.csv"), h, rows)
    return run


def final_window_mean(curve: list[IterationRecord], window: int = 10, key: str = "eval_return") -> float:
    tail = curve[-window:]
    return float(np.mean([getattr(r, key) for r in tail])) if tail else float("nan")


__all__ = [
    "Bundle", "CentralizedResult", "EXIT_CONFIG", "EXIT_CRASH", "EXIT_EVAL", "EXIT_OK", "EXIT_USAGE", "EvalReport",
    "EvaluationError", "Experiment", "HierarchicalRun", "LearnerCrash", "ResumeError", "RunDirectory", "RunError",
    "RunPlan", "TimingLedger", "build_experiment", "evaluate", "final_window_mean", "load_bundle",
    "resolve_neighbors", "run_centralized_baseline", "run_decentralized_only", "run_evaluate", "run_hierarchical",
    "run_sequential_coordinator", "schedule_violations", "write_report", "write_trace",
]
