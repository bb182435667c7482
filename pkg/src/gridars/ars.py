"""Augmented random search: perturb, evaluate, rank, update, decay.

The same learner drives area policies, the coordinator and the centralized
baseline; each supplies a ``problem`` with an ``evaluate`` method.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class ArsHyperParams:
    alpha: float = 1.0
    n_directions: int = 8
    noise_std: float = 2.0
    top_b: int = 4
    decay: float = 0.995
    max_iters: int = 100

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if self.n_directions < 1:
            out.append("n_directions must be >= 1")
        if not 1 <= self.top_b <= max(self.n_directions, 1):
            out.append(f"top_b ({self.top_b}) must lie in [1, n_directions ({self.n_directions})]")
        if self.alpha <= 0:
            out.append("alpha must be positive")
        if self.noise_std <= 0:
            out.append("noise_std must be positive")
        if not 0 < self.decay <= 1:
            out.append("decay must lie in (0, 1]")
        if self.max_iters < 0:
            out.append("max_iters must be >= 0")
        return out

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class PerturbationResult:
    direction_index: int
    delta_seed: tuple  # entropy that regenerates the direction
    r_plus: float
    r_minus: float
    obs_stats: tuple | None = None  # (count, mean, m2) of raw observations, if tracked

    def __post_init__(self):
        if not (np.isfinite(self.r_plus) and np.isfinite(self.r_minus)):
            raise ValueError(f"direction {self.direction_index}: non-finite return")


# -- directions -------------------------------------------------------------

def direction_seed(master_seed: int, learner: int, iteration: int, index: int) -> tuple:
    return (int(master_seed), int(learner), int(iteration), int(index))


def direction_from_seed(seed: tuple, n_params: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(list(seed))).standard_normal(n_params)


def sample_directions(n_params: int, n: int, master_seed: int, iteration: int, learner: int = 0):
    """(seeds, (n, n_params) i.i.d. standard normal directions)."""
    if n_params < 1:
        raise ValueError("n_params must be >= 1")
    seeds = [direction_seed(master_seed, learner, iteration, i) for i in range(n)]
    return seeds, np.stack([direction_from_seed(s, n_params) for s in seeds]) if n else np.empty((0, n_params))


def perturb(theta, delta, nu: float):
    theta = np.asarray(theta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if theta.shape != delta.shape:
        raise ValueError(f"theta {theta.shape} and delta {delta.shape} differ in shape")
    return theta + nu * delta, theta - nu * delta


# -- update -----------------------------------------------------------------

def select_top(results, b: int) -> list:
    """Top ``b`` results by max(r+, r-), lower direction index first on ties."""
    ranked = sorted(results, key=lambda r: (-max(r.r_plus, r.r_minus), r.direction_index))
    return ranked[:b]


def rank_and_update(theta, results, alpha: float, b: int, directions=None):
    """One ARS step.  ``directions`` maps direction index to its vector; when
    omitted, vectors are regenerated from each result's seed."""
    theta = np.asarray(theta, dtype=float)
    if not results:
        return theta.copy()
    if not 1 <= b <= len(results):
        raise ValueError(f"top_b={b} with {len(results)} results")
    top = select_top(results, b)
    rewards = np.array([[r.r_plus, r.r_minus] for r in top], dtype=float)
    sigma = max(float(rewards.std()), SIGMA_FLOOR)
    step = np.zeros_like(theta)
    for r in top:
        d = directions[r.direction_index] if directions is not None else direction_from_seed(r.delta_seed, theta.size)
        step += (r.r_plus - r.r_minus) * np.asarray(d, dtype=float)
    return theta + alpha / (b * sigma) * step


def decay_step(alpha: float, nu: float, eps: float):
    if not 0 < eps <= 1:
        raise ValueError("decay must lie in (0, 1]")
    return alpha * eps, nu * eps


# -- learner ----------------------------------------------------------------

class ArsProblem(Protocol):
    def evaluate(self, plus: np.ndarray, minus: np.ndarray, normalizer):
        """Returns (r_plus (N,), r_minus (N,), per-direction obs stats or None, env steps)."""

    def evaluate_policy(self, theta: np.ndarray, normalizer):
        """Returns (mean return, per-scenario returns) of the unperturbed policy."""


@dataclass
class ArsState:
    theta: np.ndarray
    alpha: float
    nu: float
    iteration: int = 0  # completed iterations
    normalizer: object = None  # RunningNormalizer or None
    env_steps: int = 0
    rollouts: int = 0

    def copy(self) -> "ArsState":
        return replace(self, theta=self.theta.copy())


@dataclass
class IterationRecord:
    iteration: int
    mean_return: float  # mean over all perturbed rollouts
    eval_return: float  # unperturbed policy after the update
    alpha: float
    nu: float
    busy_seconds: float
    extra: dict = field(default_factory=dict)


class ArsLearner:
    """Sole owner of (theta, normalizer, alpha, nu) for one policy."""

    def __init__(self, problem, hp: ArsHyperParams, state: ArsState, master_seed: int, learner_id: int = 0):
        self.problem = problem
        self.hp = hp
        self.state = state
        self.master_seed = int(master_seed)
        self.learner_id = int(learner_id)

    @classmethod
    def fresh(cls, problem, hp: ArsHyperParams, theta0, normalizer, master_seed: int, learner_id: int = 0):
        state = ArsState(np.asarray(theta0, dtype=float).copy(), hp.alpha, hp.noise_std, 0, normalizer)
        return cls(problem, hp, state, master_seed, learner_id)

    @property
    def done(self) -> bool:
        return self.state.iteration >= self.hp.max_iters

    def step(self) -> IterationRecord:
        t0 = time.perf_counter()
        st, hp = self.state, self.hp
        k = st.iteration + 1
        seeds, deltas = sample_directions(st.theta.size, hp.n_directions, self.master_seed, k, self.learner_id)
        plus = st.theta[None, :] + st.nu * deltas
        minus = st.theta[None, :] - st.nu * deltas
        r_plus, r_minus, stats, steps, rollouts = self.problem.evaluate(plus, minus, st.normalizer)
        results = [PerturbationResult(i, seeds[i], float(r_plus[i]), float(r_minus[i]),
                                      None if stats is None else stats[i]) for i in range(hp.n_directions)]
        theta = rank_and_update(st.theta, results, st.alpha, hp.top_b, deltas)
        norm = st.normalizer
        if norm is not None and stats is not None:
            for r in results:
                norm = norm.merge(*r.obs_stats)
        eval_ret = self.problem.evaluate_policy(theta, norm)[0]
        used_alpha, used_nu = st.alpha, st.nu
        alpha, nu = decay_step(st.alpha, st.nu, hp.decay)
        self.state = ArsState(theta, alpha, nu, k, norm, st.env_steps + int(steps), st.rollouts + int(rollouts))
        mean_ret = float(np.mean(np.concatenate([r_plus, r_minus])))
        return IterationRecord(k, mean_ret, float(eval_ret), used_alpha, used_nu, time.perf_counter() - t0)
