"""Per-area ARS learners over the batched grid environment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import reward as rw
from .ars import ArsHyperParams, ArsLearner, ArsState, IterationRecord
from .engine import AlwaysOn, AreaReward, GatherObs, PolicyBank, run_episodes
from .env.observe import AreaView
from .env.surrogate import FaultScenario, GridModel
from .policy import LstmPolicySpec, RunningNormalizer, init_params
from .snapshot import PolicySnapshot
from .workers import SerialPool


@dataclass(frozen=True)
class FaultSet:
    fault_buses: tuple
    durations: tuple
    t_fault: float = 1.0
    episode_length: float = 10.0

    def __post_init__(self):
        if not self.fault_buses or not self.durations:
            raise ValueError("a fault set needs at least one bus and one duration")
        if any(d < 0 for d in self.durations):
            raise ValueError("fault durations must be >= 0")

    def scenarios(self) -> list[FaultScenario]:
        """Bus-major cross product; duration 0 gives the no-fault rollout."""
        return [FaultScenario(int(b), float(d), self.t_fault, episode_length=self.episode_length)
                for b in self.fault_buses for d in self.durations]

    @property
    def size(self) -> int:
        return len(self.fault_buses) * len(self.durations)


@dataclass(eq=False)
class AreaTask:
    """Observation, actuation and reward wiring of one searched policy.

    A single view is an area agent; several views concatenated make the
    centralized policy (observations and actions in view order, reward summed).
    """

    model: GridModel
    views: list
    coeffs: rw.RewardCoefficients
    lstm_units: int = 16
    dense_units: int = 16
    action_bias: float = 0.0

    def __post_init__(self):
        self.views = list(self.views)
        self.observe = GatherObs(np.concatenate([v.gather_for(self.model.n_buses) for v in self.views]))
        self.slots = np.concatenate([v.load_slots for v in self.views]).astype(np.int64)
        self.spec = LstmPolicySpec(self.observe.dim, self.lstm_units, self.dense_units, "continuous",
                                   len(self.slots))
        self.reward = AreaReward(self.views, self.coeffs)

    @property
    def areas(self) -> list[int]:
        return [v.area for v in self.views]

    def bank(self, param_rows, rows, normalizer) -> PolicyBank:
        return PolicyBank(self.spec, param_rows, rows, normalizer, self.observe, self.slots, self.action_bias)

    def empty_normalizer(self) -> RunningNormalizer:
        return RunningNormalizer(self.spec.input_dim)


@dataclass
class RolloutResult:
    ret: float
    steps: int
    penalized: bool
    shed_total: float
    late_violation: bool
    obs: np.ndarray  # raw observations of the counted steps
    traces: dict


def rollout(task: AreaTask, theta, normalizer: RunningNormalizer, scenario: FaultScenario,
            record: bool = True) -> RolloutResult:
    bank = task.bank(np.asarray(theta, float)[None, :], np.zeros(1, dtype=np.int64), normalizer)
    out = run_episodes(task.model, [scenario], [bank], AlwaysOn(), task.reward, track=bank, record=record,
                       terminate=task.coeffs.terminate_on_penalty)
    obs = out.obs[:, 0][out.alive_obs[:, 0]]
    return RolloutResult(float(out.returns[0]), int(out.steps[0]), bool(out.penalized[0]),
                         float(out.shed_total[0]), bool(out.late_violation[0]), obs, out.traces)


class PolicySearchProblem:
    """ARS problem: every perturbed parameter row runs over all training scenarios.

    ``run_batch(param_rows, rows, scenarios, normalizer, track)`` must return an
    EpisodeBatch; the pool splits the direction list into chunks, each chunk
    being one independent batch.
    """

    def __init__(self, scenarios: list[FaultScenario], run_batch, pool=None):
        self.scenarios = list(scenarios)
        self.run_batch = run_batch
        self.pool = pool or SerialPool()
        self.last_eval: np.ndarray | None = None

    @property
    def m(self) -> int:
        return len(self.scenarios)

    def _directions_chunk(self, plus, minus, normalizer, idx):
        m = self.m
        rows_param = np.concatenate([plus[idx], minus[idx]])
        n = len(idx)
        rows = np.repeat(np.arange(2 * n), m)
        scen = self.scenarios * (2 * n)
        out = self.run_batch(rows_param, rows, scen, normalizer, True)
        ret = out.returns.reshape(2 * n, m).mean(axis=1)
        groups = [np.concatenate([np.arange(i * m, (i + 1) * m), np.arange((n + i) * m, (n + i + 1) * m)])
                  for i in range(n)]
        stats = out.group_moments(groups) if out.obs is not None else [None] * n
        return ret[:n], ret[n:], stats, int(out.steps.sum()), 2 * n * m

    def evaluate(self, plus, minus, normalizer):
        chunks = self.pool.split(plus.shape[0])
        parts = self.pool.map(lambda idx: self._directions_chunk(plus, minus, normalizer, idx), chunks)
        r_plus = np.concatenate([p[0] for p in parts])
        r_minus = np.concatenate([p[1] for p in parts])
        stats = [s for p in parts for s in p[2]]
        return r_plus, r_minus, stats, sum(p[3] for p in parts), sum(p[4] for p in parts)

    def evaluate_policy(self, theta, normalizer):
        out = self.run_batch(np.asarray(theta, float)[None, :], np.zeros(self.m, dtype=np.int64),
                             self.scenarios, normalizer, False)
        self.last_eval = out.returns.copy()
        return float(out.returns.mean()), out.returns


def area_problem(task: AreaTask, scenarios, pool=None) -> PolicySearchProblem:
    def run_batch(param_rows, rows, scen, normalizer, track):
        bank = task.bank(param_rows, rows, normalizer)
        return run_episodes(task.model, scen, [bank], AlwaysOn(), task.reward, track=bank if track else None,
                            terminate=task.coeffs.terminate_on_penalty)
    return PolicySearchProblem(scenarios, run_batch, pool)


class DarsRun:
    """One area learner plus its curve and snapshot publication schedule."""

    def __init__(self, task: AreaTask, hp: ArsHyperParams, fault_set: FaultSet, seed: int,
                 learner_id: int = 0, publish_every: int = 10, pool=None, init_seed: int | None = None,
                 state: ArsState | None = None, curve: list | None = None, published: int = 0):
        self.task = task
        self.hp = hp
        self.fault_set = fault_set
        self.seed = int(seed)
        self.publish_every = int(publish_every)
        if self.publish_every < 1:
            raise ValueError("publication interval must be >= 1")
        self.problem = area_problem(task, fault_set.scenarios(), pool)
        if state is None:
            theta0 = init_params(task.spec, self.seed if init_seed is None else init_seed).values
            self.learner = ArsLearner.fresh(self.problem, hp, theta0, task.empty_normalizer(), self.seed, learner_id)
        else:
            self.learner = ArsLearner(self.problem, hp, state, self.seed, learner_id)
        self.curve: list[IterationRecord] = list(curve or [])
        self.published = int(published)

    @property
    def area(self) -> int:
        return self.task.views[0].area

    @property
    def state(self) -> ArsState:
        return self.learner.state

    @property
    def done(self) -> bool:
        return self.learner.done

    def snapshot(self, tick: int = 0) -> PolicySnapshot:
        st = self.state
        self.published += 1
        return PolicySnapshot(self.area, self.published, st.iteration, self.task.spec, st.theta.copy(),
                              st.normalizer, converged=self.done, tick=tick)

    def step(self) -> tuple[IterationRecord, bool]:
        """Run one iteration; the flag says a snapshot is due."""
        rec = self.learner.step()
        self.curve.append(rec)
        due = rec.iteration % self.publish_every == 0 or self.done
        return rec, due


def dars_train(task: AreaTask, hp: ArsHyperParams, fault_set: FaultSet, seed: int, publish_every: int = 10,
               on_snapshot=None, pool=None, learner_id: int = 0) -> DarsRun:
    run = DarsRun(task, hp, fault_set, seed, learner_id, publish_every, pool)
    while not run.done:
        _, due = run.step()
        if due and on_snapshot is not None:
            on_snapshot(run.snapshot())
    return run
