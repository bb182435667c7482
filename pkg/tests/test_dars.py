import numpy as np
import pytest

from gridars.ars import ArsHyperParams, PerturbationResult, decay_step, perturb, rank_and_update, sample_directions
from gridars.config import DATA_DIR
from gridars.dars import AreaTask, DarsRun, FaultSet, area_problem, dars_train, rollout
from gridars.env.observe import area_view
from gridars.env.surrogate import FaultScenario, GridModel
from gridars.env.topology import load_topology
from gridars.policy import init_params
from gridars.reward import RewardCoefficients
from gridars.snapshot import SnapshotFeed
from gridars.workers import ThreadPool

TINY = ArsHyperParams(alpha=0.05, n_directions=3, noise_std=0.05, top_b=2, decay=0.995, max_iters=3)


@pytest.fixture(scope="module")
def task():
    topo = load_topology(DATA_DIR / "toy3area.yaml")
    return AreaTask(GridModel(topo), [area_view(topo, 2, (13, 18))], RewardCoefficients(), 4, 4, action_bias=3.0)


def test_fault_set_cross_product():
    fs = FaultSet((3, 5), (0.0, 0.05, 0.08))
    sc = fs.scenarios()
    assert fs.size == 6 and len(sc) == 6
    assert [(s.fault_bus, s.duration) for s in sc[:3]] == [(3, 0.0), (3, 0.05), (3, 0.08)]
    assert not sc[0].has_fault
    with pytest.raises(ValueError):
        FaultSet((), (0.0,))
    with pytest.raises(ValueError):
        FaultSet((1,), (-0.1,))


def test_direction_statistics():
    _, d = sample_directions(50, 1000, 123, 1)
    assert abs(d.mean()) < 0.05
    assert abs(d.var() - 1.0) < 0.1


def test_perturb_cases():
    theta = np.array([0.3, -0.2])
    p, m = perturb(theta, np.array([1.0, 2.0]), 0.0)
    assert np.array_equal(p, theta) and np.array_equal(m, theta)
    p, m = perturb(np.zeros(3), np.eye(3)[0], 1.0)
    assert np.array_equal(p, [1, 0, 0]) and np.array_equal(m, [-1, 0, 0])
    rng = np.random.default_rng(5)
    theta, delta, nu = rng.standard_normal(7), rng.standard_normal(7), 0.37
    p, m = perturb(theta, delta, nu)
    assert all(p[i] == theta[i] + nu * delta[i] and m[i] == theta[i] - nu * delta[i] for i in range(7))


def test_hand_arithmetic_update():
    d1, d2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    res = [PerturbationResult(0, (0,), 5.0, 1.0), PerturbationResult(1, (1,), 2.0, 2.0)]
    alpha = 0.3
    out = rank_and_update(np.zeros(2), res, alpha, 1, {0: d1, 1: d2})
    assert np.allclose(out, 2 * alpha * d1, atol=1e-15)


def test_decay_values():
    assert decay_step(1.0, 2.0, 1.0) == (1.0, 2.0)
    a, nu = 1.0, 2.0
    for i in range(100):
        a, nu = decay_step(a, nu, 0.995)
        if i == 0:
            assert nu == pytest.approx(1.99)
    assert a == pytest.approx(0.6058, abs=5e-5)


def test_zero_policy_sheds_and_saturated_policy_is_free(task):
    nofault = FaultScenario(None)
    zero = np.zeros(task.spec.n_params)
    plain = AreaTask(task.model, task.views, task.coeffs, 4, 4, action_bias=0.0)
    r = rollout(plain, zero, plain.empty_normalizer(), nofault)
    assert r.ret < 0 and r.shed_total > 0
    sat = zero.copy()
    sat[-task.spec.head_size:] = 40.0  # head biases saturate tanh at +1: no shedding
    r = rollout(plain, sat, plain.empty_normalizer(), nofault)
    assert r.ret == 0.0 and r.shed_total == 0.0


def test_rollout_is_deterministic(task):
    theta = init_params(task.spec, 3).values
    sc = FaultScenario(12, 0.08)
    a = rollout(task, theta, task.empty_normalizer(), sc)
    b = rollout(task, theta, task.empty_normalizer(), sc)
    assert a.ret == b.ret and np.array_equal(a.traces["V"], b.traces["V"])
    assert a.obs.shape[1] == task.spec.input_dim


def test_problem_returns_match_single_rollouts(task):
    scen = FaultSet((12,), (0.0, 0.08)).scenarios()
    prob = area_problem(task, scen)
    theta = init_params(task.spec, 1).values
    norm = task.empty_normalizer().update(np.full(task.spec.input_dim, 0.9))
    mean, per = prob.evaluate_policy(theta, norm)
    singles = [rollout(task, theta, norm, sc, record=False).ret for sc in scen]
    assert np.array_equal(per, singles) and mean == pytest.approx(np.mean(singles))


def test_pool_size_does_not_change_results(task):
    scen = FaultSet((8,), (0.05,)).scenarios()
    seeds, deltas = sample_directions(task.spec.n_params, 4, 9, 1)
    theta = init_params(task.spec, 2).values
    plus, minus = theta + 0.05 * deltas, theta - 0.05 * deltas
    norm = task.empty_normalizer()
    serial = area_problem(task, scen).evaluate(plus, minus, norm)
    pool = ThreadPool(3)
    try:
        threaded = area_problem(task, scen, pool).evaluate(plus, minus, norm)
    finally:
        pool.close()
    assert np.array_equal(serial[0], threaded[0]) and np.array_equal(serial[1], threaded[1])
    for s, t in zip(serial[2], threaded[2]):
        assert all(np.array_equal(x, y) for x, y in zip(s, t))


def test_zero_iterations_keep_initial_policy(task):
    hp = ArsHyperParams(n_directions=2, top_b=1, max_iters=0)
    run = dars_train(task, hp, FaultSet((8,), (0.0,)), seed=4)
    assert np.array_equal(run.state.theta, init_params(task.spec, 4).values)
    assert run.curve == []


def test_training_is_reproducible_and_publishes(task):
    fs = FaultSet((12,), (0.0, 0.08))
    feed = SnapshotFeed([2])
    a = dars_train(task, TINY, fs, seed=11, publish_every=2, on_snapshot=feed.publish, learner_id=2)
    b = dars_train(task, TINY, fs, seed=11, publish_every=2, learner_id=2)
    assert np.array_equal(a.state.theta, b.state.theta)
    assert [r.eval_return for r in a.curve] == [r.eval_return for r in b.curve]
    hist = feed.history(2)
    assert [s.version for s in hist] == [1, 2] and [s.iteration for s in hist] == [2, 3]
    assert hist[-1].converged and not hist[0].converged
    with pytest.raises(ValueError):
        hist[0].theta[0] = 1.0  # published parameters are read-only
    assert a.state.normalizer.n > 0


def test_resumed_run_matches_uninterrupted(task):
    fs = FaultSet((12,), (0.08,))
    whole = DarsRun(task, TINY, fs, seed=5)
    while not whole.done:
        whole.step()
    part = DarsRun(task, TINY, fs, seed=5)
    part.step()
    resumed = DarsRun(task, TINY, fs, seed=5, state=part.state.copy(), curve=part.curve)
    while not resumed.done:
        resumed.step()
    assert np.array_equal(whole.state.theta, resumed.state.theta)
    assert np.array_equal(whole.state.normalizer.mean, resumed.state.normalizer.mean)


def test_feed_rejects_stale_versions(task):
    feed = SnapshotFeed([2])
    run = DarsRun(task, TINY, FaultSet((8,), (0.0,)), seed=1)
    s1, s2 = run.snapshot(), run.snapshot()
    feed.publish(s2)
    with pytest.raises(ValueError):
        feed.publish(s1)


def test_env_step_accounting_matches_single_rollouts(task):
    # penalized rollouts terminate early, so the count is not simply 2*N*m*steps_per_episode
    fs = FaultSet((12,), (0.0, 0.08))
    hp = ArsHyperParams(alpha=0.05, n_directions=3, noise_std=0.5, top_b=2, decay=1.0, max_iters=2)
    run = DarsRun(task, hp, fs, seed=6, learner_id=2)
    expected_steps = expected_rollouts = 0
    for _ in range(hp.max_iters):
        k = run.state.iteration + 1
        seeds, deltas = sample_directions(task.spec.n_params, hp.n_directions, 6, k, learner=2)
        theta, nu, norm = run.state.theta, run.state.nu, run.state.normalizer
        for i in range(hp.n_directions):
            for sign in (1.0, -1.0):
                for sc in fs.scenarios():
                    expected_steps += rollout(task, theta + sign * nu * deltas[i], norm, sc, record=False).steps
                    expected_rollouts += 1
        run.step()
    assert run.state.rollouts == expected_rollouts == 2 * 3 * 2 * 2
    assert run.state.env_steps == expected_steps
