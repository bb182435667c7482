"""Batched closed-loop episodes.

Every rollout of a batch shares the time axis; each row carries its own fault
scenario and its own parameter row for the policy being searched.  All
per-row arithmetic runs through row-independent kernels, so a rollout's
result does not depend on which other rollouts share its batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import reward as rw
from .env.observe import AreaView
from .env.profile import DEFAULT_PROFILE, FINAL_LEVEL, PENALTY_DELAY, elapsed_since
from .env.surrogate import BatchGrid, FaultScenario, GridModel
from .policy import LstmPolicySpec, RunningNormalizer, batch_moments, forward_batch, unpack


# -- observation sources ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GatherObs:
    """Columns of the stacked [V, D] matrix."""

    idx: np.ndarray

    def __call__(self, V, D):
        return np.concatenate([V, D], axis=1)[:, self.idx]

    @property
    def dim(self) -> int:
        return len(self.idx)


@dataclass(frozen=True, eq=False)
class AreaMinObs:
    """Minimum voltage of each bus group (one group per area)."""

    groups: tuple

    def __call__(self, V, D):
        return np.stack([V[:, g].min(axis=1) for g in self.groups], axis=1)

    @property
    def dim(self) -> int:
        return len(self.groups)


def area_obs(model: GridModel, view: AreaView) -> GatherObs:
    return GatherObs(view.gather_for(model.n_buses))


def coordinator_obs(model: GridModel) -> AreaMinObs:
    topo = model.topology
    return AreaMinObs(tuple(np.array([topo.index(b) for b in topo.area_buses(a)], dtype=np.int64)
                            for a in topo.area_ids))


# -- policies -------------------------------------------------------------------

@dataclass(eq=False)
class PolicyBank:
    """One network architecture evaluated with R parameter rows over B rollouts."""

    spec: LstmPolicySpec
    param_rows: np.ndarray  # (R, n_params)
    rows: np.ndarray  # (B,) parameter row of each rollout
    normalizer: RunningNormalizer  # frozen statistics
    observe: object  # GatherObs | AreaMinObs
    slots: np.ndarray | None = None  # load slots driven by a continuous head
    action_bias: float = 0.0

    def __post_init__(self):
        self.param_rows = np.atleast_2d(np.asarray(self.param_rows, dtype=np.float64))
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.weights = unpack(self.spec, self.param_rows)
        self.mean = np.asarray(self.normalizer.mean, float)
        self.scale = np.asarray(self.normalizer.scale, float)
        if self.observe.dim != self.spec.input_dim:
            raise ValueError(f"observation has {self.observe.dim} entries, policy expects {self.spec.input_dim}")

    def start(self, batch: int):
        h = self.spec.lstm_units
        self.h = np.zeros((batch, h))
        self.c = np.zeros((batch, h))

    def act(self, V, D):
        raw_obs = self.observe(V, D)
        x = (raw_obs - self.mean) / self.scale
        out, self.h, self.c = forward_batch(self.weights, self.rows, self.h, self.c, x)
        return raw_obs, out


def continuous_actions(raw, bias: float = 0.0):
    return 0.1 * (np.tanh(raw + bias) - 1.0)


# -- gates: which area agents act -------------------------------------------------

class AlwaysOn:
    def start(self, batch, n_agents):
        self.mask = np.ones((batch, n_agents), dtype=bool)

    def decide(self, k, t, V, D, t_pf):
        return self.mask, None


class FixedMask:
    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def start(self, batch, n_agents):
        if self.mask.shape != (batch, n_agents):
            raise ValueError("fixed mask has the wrong shape")

    def decide(self, k, t, V, D, t_pf):
        return self.mask, None


class CoordinatorGate:
    """Discrete coordinator choosing one candidate area subset per step.

    ``allowed`` optionally restricts each rollout to a subset of candidates
    (restricted action spaces).  In ``event`` mode the choice made on the
    first step at or after fault clearing is held for the rest of the
    episode and no area acts before it.
    """

    def __init__(self, bank: PolicyBank, candidate_masks: np.ndarray, allowed=None,
                 mode: str = "per_step"):
        self.bank = bank
        self.candidate_masks = np.asarray(candidate_masks, dtype=bool)
        self.allowed = None if allowed is None else np.asarray(allowed, dtype=bool)
        if mode not in ("per_step", "event"):
            raise ValueError(f"unknown coordinator mode {mode!r}")
        self.mode = mode
        self.last_obs = None

    def start(self, batch, n_agents):
        self.bank.start(batch)
        self.latched = np.full(batch, -1, dtype=np.int64)

    def decide(self, k, t, V, D, t_pf):
        raw_obs, scores = self.bank.act(V, D)
        self.last_obs = raw_obs
        if self.allowed is not None:
            scores = np.where(self.allowed, scores, -np.inf)
        choice = np.argmax(scores, axis=1)
        if self.mode == "event":
            ready = elapsed_since(t, t_pf) >= 0
            newly = ready & (self.latched < 0)
            self.latched = np.where(newly, choice, self.latched)
            choice = self.latched
            mask = np.where((choice >= 0)[:, None], self.candidate_masks[np.maximum(choice, 0)], False)
            return mask, choice
        return self.candidate_masks[choice], choice


# -- rewards -----------------------------------------------------------------------

@dataclass(eq=False)
class AreaReward:
    views: list  # one AreaView -> lower reward; several -> their sum
    coeffs: rw.RewardCoefficients

    def __call__(self, t, t_pf, V, shed, invalid):
        total = np.zeros(V.shape[0])
        fired_any = np.zeros(V.shape[0], dtype=bool)
        for view in self.views:
            r, fired = rw.lower_reward_batch(t, t_pf, V[:, view.voltage_idx], shed[:, view.load_slots],
                                             invalid[:, view.load_slots].sum(axis=1), self.coeffs)
            total = total + r
            fired_any |= fired
        return total, fired_any


@dataclass(eq=False)
class CoordinatorReward:
    observe: AreaMinObs
    weights: np.ndarray
    coeffs: rw.RewardCoefficients

    def __call__(self, t, t_pf, V, shed, invalid):
        minima = self.observe(V, None)
        return rw.coordinator_reward_batch(t, t_pf, minima, shed, invalid.sum(axis=1), self.weights,
                                           self.coeffs)


# -- the episode loop ------------------------------------------------------------------

@dataclass
class EpisodeBatch:
    returns: np.ndarray
    steps: np.ndarray  # control steps executed before termination
    penalized: np.ndarray
    shed_total: np.ndarray  # p.u., whole episode
    late_violation: np.ndarray  # some bus < 0.95 after clearing + 4 s
    profile_violation: np.ndarray  # some bus under the recovery envelope after clearing
    nadir: np.ndarray  # lowest post-clearing bus voltage
    obs: np.ndarray | None = None  # (T, B, d) raw observations of the tracked bank
    alive_obs: np.ndarray | None = None  # (T, B) whether each observation counts
    traces: dict = field(default_factory=dict)

    def group_moments(self, groups):
        """(count, mean, m2) of tracked observations for each group of rollout indices."""
        out = []
        for g in groups:
            g = np.asarray(g, dtype=np.int64)
            sel = self.obs[:, g, :][self.alive_obs[:, g]]
            out.append(batch_moments(sel))
        return out


def run_episodes(model: GridModel, scenarios: list[FaultScenario], agents: list[PolicyBank], gate,
                 reward, track: PolicyBank | None = None, record: bool = False,
                 terminate: bool = True) -> EpisodeBatch:
    grid = BatchGrid(model, scenarios)
    batch = grid.size
    steps = {model.steps_per_episode(sc) for sc in scenarios}
    if len(steps) != 1:
        raise ValueError("all scenarios of a batch must share the episode length")
    n_steps = steps.pop()
    dt = model.params.dt_control
    for a in agents:
        a.start(batch)
    gate.start(batch, len(agents))

    ret = np.zeros(batch)
    alive = np.ones(batch, dtype=bool)
    n_alive_steps = np.zeros(batch, dtype=np.int64)
    penalized = np.zeros(batch, dtype=bool)
    shed_total = np.zeros(batch)
    late = np.zeros(batch, dtype=bool)
    prof = np.zeros(batch, dtype=bool)
    nadir = np.full(batch, np.inf)
    t_pf = grid.t_pf
    obs_log = alive_log = None
    if track is not None:
        obs_log = np.empty((n_steps, batch, track.spec.input_dim))
        alive_log = np.empty((n_steps, batch), dtype=bool)
    if record:
        tr_v = np.empty((n_steps + 1, batch, model.n_buses))
        tr_d = np.empty((n_steps + 1, batch, model.n_loads))
        tr_u = np.zeros((n_steps, batch, model.n_loads))
        tr_c = np.full((n_steps, batch), -1, dtype=np.int64)
        tr_v[0], tr_d[0] = grid.V, grid.D

    for k in range(n_steps):
        t = k * dt
        V, D = grid.V, grid.D
        mask, choice = gate.decide(k, t, V, D, t_pf)
        u = np.zeros((batch, model.n_loads))
        for i, agent in enumerate(agents):
            raw_obs, raw = agent.act(V, D)
            if agent is track:
                obs_log[k] = raw_obs
            act = continuous_actions(raw, agent.action_bias)
            u[:, agent.slots] = np.where(mask[:, i:i + 1], act, 0.0)
        if track is not None:
            if track not in agents:
                obs_log[k] = gate.last_obs
            alive_log[k] = alive
        shed, invalid = grid.apply_actions(u)
        grid.advance()
        t_next = (k + 1) * dt
        r, fired = reward(t_next, t_pf, grid.V, shed, invalid)
        ret += np.where(alive, r, 0.0)
        n_alive_steps += alive
        penalized |= fired & alive
        if terminate:
            alive &= ~fired
        shed_total += shed.sum(axis=1)
        e = elapsed_since(t_next, t_pf)
        vmin = grid.V.min(axis=1)
        late |= (e > PENALTY_DELAY) & (vmin < FINAL_LEVEL)
        sig = DEFAULT_PROFILE.sigma(np.full(batch, t_next), t_pf)
        prof |= (e > 0) & np.any(grid.V < sig[:, None], axis=1)
        nadir = np.where(e > 0, np.minimum(nadir, vmin), nadir)
        if record:
            tr_v[k + 1], tr_d[k + 1], tr_u[k] = grid.V, grid.D, u
            if choice is not None:
                tr_c[k] = choice

    out = EpisodeBatch(ret, n_alive_steps, penalized, shed_total, late, prof, nadir, obs_log, alive_log)
    if record:
        out.traces = {"V": tr_v, "D": tr_d, "U": tr_u, "choice": tr_c,
                      "t": dt * np.arange(n_steps + 1)}
    return out
