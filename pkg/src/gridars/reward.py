"""Per-step rewards for area agents and for the coordinator.

Every function accepts scalars or arrays with a leading batch axis; the
episode engine calls them on whole batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env.profile import DEFAULT_PROFILE, FINAL_LEVEL, PENALTY_DELAY, RecoveryProfile, elapsed_since


@dataclass(frozen=True)
class RewardCoefficients:
    c1: float = 5.0  # voltage deviation
    c2: float = 2.0  # shed load, per p.u.
    c3: float = 1.0  # invalid action, per occurrence
    penalty: float = -1000.0
    area_weights: dict = field(default_factory=dict)  # coordinator c_i; missing areas use default_area_weight
    default_area_weight: float = 5.0
    terminate_on_penalty: bool = True

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ValueError("reward weights c1, c2, c3 must be positive")

    def area_weight(self, area: int) -> float:
        return float(self.area_weights.get(area, self.default_area_weight))

    def to_dict(self) -> dict:
        return {"c1": self.c1, "c2": self.c2, "c3": self.c3, "penalty": self.penalty,
                "area_weights": dict(self.area_weights), "default_area_weight": self.default_area_weight,
                "terminate_on_penalty": self.terminate_on_penalty}


@dataclass(frozen=True)
class StepContext:
    t: float
    t_pf: float
    v_obs: np.ndarray  # observed bus voltages, or per-area minima for the coordinator
    shed: np.ndarray  # p.u. shed per load bus during this step (>= 0)
    invalid_count: int = 0


def delta_v(v, t, t_pf, profile: RecoveryProfile = DEFAULT_PROFILE):
    """min(v - band level, 0) on the band containing t; 0 up to clearing."""
    sigma = np.asarray(profile.sigma(t, t_pf))
    v = np.asarray(v, dtype=float)
    if sigma.ndim == 1 and v.ndim == 2:
        sigma = sigma[:, None]
    out = np.minimum(v - sigma, 0.0)
    post = elapsed_since(t, t_pf) > 0
    if np.ndim(post) == 1 and v.ndim == 2:
        post = post[:, None]
    out = np.where(post, out, 0.0)
    return out if out.ndim else float(out)


def penalty_window(t, t_pf):
    return elapsed_since(t, t_pf) > PENALTY_DELAY


def lower_reward_batch(t, t_pf, v_obs, shed, invalid, coeffs: RewardCoefficients,
                       profile: RecoveryProfile = DEFAULT_PROFILE):
    """Returns (reward, penalty_fired) arrays for a batch of area agents."""
    v_obs = np.atleast_2d(v_obs)
    shed = np.atleast_2d(shed)
    t_pf = np.broadcast_to(np.asarray(t_pf, dtype=float), (v_obs.shape[0],))
    fired = penalty_window(t, t_pf) & np.any(v_obs < FINAL_LEVEL, axis=1)
    dv = delta_v(v_obs, np.full(t_pf.shape, t), t_pf, profile).sum(axis=1)
    regular = coeffs.c1 * dv - coeffs.c2 * shed.sum(axis=1) - coeffs.c3 * np.asarray(invalid, float)
    return np.where(fired, coeffs.penalty, regular), fired


def lower_reward(ctx: StepContext, coeffs: RewardCoefficients,
                 profile: RecoveryProfile = DEFAULT_PROFILE) -> float:
    r, _ = lower_reward_batch(ctx.t, ctx.t_pf, np.asarray(ctx.v_obs, float)[None, :],
                              np.asarray(ctx.shed, float)[None, :], np.array([ctx.invalid_count]),
                              coeffs, profile)
    return float(r[0])


def coordinator_q(sigma_t, y_c):
    """min(-(sigma - y), 0): negative exactly when the area minimum is under the envelope."""
    return np.minimum(-(np.asarray(sigma_t, float) - np.asarray(y_c, float)), 0.0)


def coordinator_reward_batch(t, t_pf, minima, shed, invalid, weights, coeffs: RewardCoefficients,
                             profile: RecoveryProfile = DEFAULT_PROFILE):
    minima = np.atleast_2d(minima)
    shed = np.atleast_2d(shed)
    t_pf = np.broadcast_to(np.asarray(t_pf, dtype=float), (minima.shape[0],))
    fired = penalty_window(t, t_pf) & np.any(minima < FINAL_LEVEL, axis=1)
    sigma = np.asarray(profile.sigma(np.full(t_pf.shape, t), t_pf))
    post = elapsed_since(t, t_pf) > 0
    q = np.where(post[:, None], coordinator_q(sigma[:, None], minima), 0.0)
    regular = (q * np.asarray(weights, float)).sum(axis=1) - coeffs.c2 * shed.sum(axis=1) \
        - coeffs.c3 * np.asarray(invalid, float)
    return np.where(fired, coeffs.penalty, regular), fired


def coordinator_reward(ctx: StepContext, weights, coeffs: RewardCoefficients,
                       profile: RecoveryProfile = DEFAULT_PROFILE) -> float:
    r, _ = coordinator_reward_batch(ctx.t, ctx.t_pf, np.asarray(ctx.v_obs, float)[None, :],
                                    np.asarray(ctx.shed, float)[None, :], np.array([ctx.invalid_count]),
                                    weights, coeffs, profile)
    return float(r[0])


def episode_return(step_rewards) -> float:
    rewards = list(step_rewards)
    if not rewards:
        raise ValueError("empty reward sequence")
    total = 0.0
    for r in rewards:
        total += float(r)
    return total
