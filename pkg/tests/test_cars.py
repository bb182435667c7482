from itertools import chain, combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridars.ars import ArsHyperParams
from gridars.cars import (ConcurrencySchedule, CoordinatorActionSpace, CoordinatorTask, SchedulingError, CarsRun,
                          build_action_space, cars_train, coordinator_rollout, coordinator_scenarios, field_of_vision,
                          representative_faults, snapshot_refresh)
from gridars.config import DATA_DIR
from gridars.dars import AreaTask, FaultSet
from gridars.engine import FixedMask, run_episodes
from gridars.env.observe import area_view, observe_area
from gridars.env.surrogate import FaultScenario, GridModel, reset
from gridars.env.topology import load_topology
from gridars.policy import LstmState, forward, init_params, normalize
from gridars.reward import RewardCoefficients
from gridars.snapshot import PolicySnapshot, SnapshotFeed

HP = ArsHyperParams(alpha=0.05, n_directions=2, noise_std=0.05, top_b=1, max_iters=2)
NEIGHBORS = {1: (), 2: (13, 18), 3: (11,)}


@pytest.fixture(scope="module")
def setup():
    topo = load_topology(DATA_DIR / "toy3area.yaml")
    model = GridModel(topo)
    coeffs = RewardCoefficients()
    tasks = {a: AreaTask(model, [area_view(topo, a, NEIGHBORS[a])], coeffs, 4, 4, action_bias=1.0)
             for a in topo.area_ids}
    snaps = {}
    for a, t in tasks.items():
        snaps[a] = PolicySnapshot(a, 1, 0, t.spec, init_params(t.spec, 10 + a).values, t.empty_normalizer())
    space = build_action_space(topo.area_adjacency())
    ctask = CoordinatorTask(model, tasks, space, coeffs, lstm_units=4, dense_units=4)
    return model, tasks, snaps, ctask


# -- action space ---------------------------------------------------------------------

def test_restricted_list_for_area_one():
    adj = {1: {2, 3}, 2: {1}, 3: {1}}
    sp = build_action_space(adj, "restricted", fault_area=1)
    assert sp.candidates == ((1,), (1, 2), (1, 3), (1, 2, 3))


def test_single_area_space():
    assert build_action_space({1: set()}).candidates == ((1,),)
    assert build_action_space({1: set()}, "restricted", 1).candidates == ((1,),)


def test_unrestricted_matches_power_set():
    areas = [1, 2, 3]
    power = [tuple(c) for c in chain.from_iterable(combinations(areas, k) for k in range(1, 4))]
    sp = build_action_space({1: {2}, 2: {1, 3}, 3: {2}})
    assert len(sp) == 7 and set(sp.candidates) == set(power)
    assert sp.masks.shape == (7, 3) and sp.masks[-1].all()


def test_restricted_union_and_allowed_mask():
    adj = {1: {2}, 2: {1, 3}, 3: {2}}
    sp = build_action_space(adj, "restricted")
    allowed = sp.allowed_for(1)
    assert {c for c, ok in zip(sp.candidates, allowed) if ok} == {(1,), (1, 2)}
    assert sp.allowed_for(None).all()
    back = CoordinatorActionSpace.from_dict(sp.to_dict())
    assert back.candidates == sp.candidates and back.mode == "restricted"


def test_action_space_errors():
    with pytest.raises(ValueError):
        CoordinatorActionSpace((), (1,))
    with pytest.raises(ValueError):
        CoordinatorActionSpace(((1,), (1,)), (1,))
    with pytest.raises(ValueError):
        CoordinatorActionSpace(((),), (1,))
    with pytest.raises(ValueError):
        build_action_space({1: {2}, 2: set()})
    with pytest.raises(ValueError):
        build_action_space({1: set()}, "sideways")


# -- composition ------------------------------------------------------------------------

def _one_step(model, tasks, snaps, subset):
    state = reset(model, FaultScenario(12, 0.1))
    obs = {a: observe_area(state, tasks[a].views[0]) for a in tasks}
    states = {a: LstmState.zeros(snaps[a].spec) for a in tasks}
    return field_of_vision(subset, snaps, states, obs, tasks, model.n_loads), obs


def test_all_areas_equals_union_of_policies(setup):
    model, tasks, snaps, _ = setup
    (u, _), obs = _one_step(model, tasks, snaps, (1, 2, 3))
    for a, t in tasks.items():
        raw, _ = forward(snaps[a].spec, snaps[a].theta, LstmState.zeros(snaps[a].spec),
                         normalize(snaps[a].normalizer, obs[a]))
        assert np.array_equal(u[t.slots], 0.1 * (np.tanh(raw + t.action_bias) - 1.0))


def test_unselected_areas_take_no_action(setup):
    model, tasks, snaps, _ = setup
    (u, states), _ = _one_step(model, tasks, snaps, (2,))
    assert np.all(u[tasks[1].slots] == 0.0) and np.all(u[tasks[3].slots] == 0.0)
    assert np.all(u[tasks[2].slots] < 0.0)
    assert set(states) == {1, 2, 3}  # every lower policy still advanced


def test_two_area_manual_composition(setup):
    model, tasks, snaps, _ = setup
    sub = {a: snaps[a] for a in (1, 3)}
    state = reset(model, FaultScenario(None))
    obs = {a: observe_area(state, tasks[a].views[0]) for a in (1, 3)}
    states = {a: LstmState.zeros(sub[a].spec) for a in (1, 3)}
    u, _ = field_of_vision((1, 3), sub, states, obs, tasks, model.n_loads)
    manual = np.zeros(model.n_loads)
    for a in (1, 3):
        raw, _ = forward(sub[a].spec, sub[a].theta, states[a], normalize(sub[a].normalizer, obs[a]))
        manual[tasks[a].slots] = 0.1 * (np.tanh(raw + 1.0) - 1.0)
    assert np.array_equal(u, manual)


def test_missing_snapshot_is_a_scheduling_error(setup):
    model, tasks, snaps, ctask = setup
    with pytest.raises(SchedulingError):
        field_of_vision((2,), {1: snaps[1]}, {1: LstmState.zeros(snaps[1].spec)}, {}, tasks, model.n_loads)
    with pytest.raises(SchedulingError):
        ctask.lower_banks({1: snaps[1]}, 1)


# -- coordinator rollouts -----------------------------------------------------------------------

def _forced(ctask, choice):
    theta = np.zeros(ctask.spec.n_params)
    theta[-ctask.spec.head_size + choice] = 5.0  # constant scores: argmax is always ``choice``
    return theta


@pytest.mark.parametrize("choice", [0, 4, 6])
def test_forced_choice_equals_hardwired_subset(setup, choice):
    model, tasks, snaps, ctask = setup
    sc = FaultScenario(12, 0.08)
    res = coordinator_rollout(ctask, _forced(ctask, choice), ctask.empty_normalizer(), snaps, sc)
    assert np.all(res.traces["choice"] == choice)
    agents = ctask.lower_banks(snaps, 1)
    mask = FixedMask(ctask.masks[choice][None, :])
    direct = run_episodes(model, [sc], agents, mask, ctask.reward)
    assert res.ret == float(direct.returns[0])


def test_coordinator_rollout_deterministic(setup):
    _, _, snaps, ctask = setup
    theta = init_params(ctask.spec, 3).values
    sc = FaultScenario(18, 0.05)
    a = coordinator_rollout(ctask, theta, ctask.empty_normalizer(), snaps, sc)
    b = coordinator_rollout(ctask, theta, ctask.empty_normalizer(), snaps, sc)
    assert a.ret == b.ret and np.array_equal(a.traces["choice"], b.traces["choice"])


def test_no_fault_free_subset_returns_zero(setup):
    model, tasks, snaps, ctask = setup
    quiet = {}
    for a, s in snaps.items():
        th = np.zeros(s.spec.n_params)
        th[-s.spec.head_size:] = 40.0  # saturated head: no shedding
        quiet[a] = PolicySnapshot(a, 1, 0, s.spec, th, s.normalizer)
    res = coordinator_rollout(ctask, _forced(ctask, 6), ctask.empty_normalizer(), quiet, FaultScenario(None))
    assert res.ret == 0.0


# -- schedule --------------------------------------------------------------------------------

def test_refresh_iterations():
    sch = ConcurrencySchedule(10, 10)
    assert [k for k in range(1, 35) if sch.is_refresh(k)] == [1, 11, 21, 31]
    assert sch.tick_of(1) == 10
    with pytest.raises(ValueError):
        ConcurrencySchedule(0, 1)


def _snap(area, version, tick, converged=False, spec=None):
    from gridars.policy import LstmPolicySpec, RunningNormalizer
    spec = spec or LstmPolicySpec(2, 2, 2)
    return PolicySnapshot(area, version, version * 2, spec, np.zeros(spec.n_params), RunningNormalizer(2),
                          converged, tick)


def test_synthetic_feed_timeline_matches_hand_schedule():
    sch = ConcurrencySchedule(h_l=2, h_c=3)
    feed = SnapshotFeed([1, 2])
    # area 1 publishes every 2 ticks; area 2 every 3 ticks
    pubs = {1: [2, 4, 6, 8, 10], 2: [3, 6, 9]}
    for a, ticks in pubs.items():
        for v, t in enumerate(ticks, start=1):
            feed.publish(_snap(a, v, t))
    active, timeline = None, []
    for k in range(1, 9):
        active = snapshot_refresh(sch, feed, k, active, max_tick=k + 2)
        timeline.append((active[1].version, active[2].version))
    # refresh at k = 1, 4, 7 reading ticks <= 3, 6, 9
    hand = [(1, 1)] * 3 + [(3, 2)] * 3 + [(4, 3)] * 2
    assert timeline == hand


def test_converged_snapshots_are_kept():
    sch = ConcurrencySchedule(1, 1)
    feed = SnapshotFeed([1])
    done = _snap(1, 1, 0, converged=True)
    feed.publish(done)
    active = snapshot_refresh(sch, feed, 1, None)
    feed.publish(_snap(1, 2, 1))
    assert snapshot_refresh(sch, feed, 2, active)[1] is done


def test_refresh_without_publication_fails():
    with pytest.raises(SchedulingError):
        snapshot_refresh(ConcurrencySchedule(), SnapshotFeed([1, 2]), 1, None)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 60))
def test_refresh_is_pure_function_of_schedule(h_l, h_c, k):
    sch = ConcurrencySchedule(h_l, h_c)
    assert sch.is_refresh(k) == ((k - 1) % h_c == 0)
    assert sch.tick_of(k) == h_l + k - 1


# -- training -------------------------------------------------------------------------------------

def test_nine_coordinator_scenarios():
    fs = {1: FaultSet((2, 3, 4), (0,)), 2: FaultSet((8, 10, 12), (0,)), 3: FaultSet((14, 16, 18), (0,))}
    reps = representative_faults(fs, seed=1)
    assert reps == representative_faults(fs, seed=1)
    assert all(len(v) == 1 and v[0] in fs[a].fault_buses for a, v in reps.items())
    assert len(coordinator_scenarios(reps, (0.0, 0.05, 0.08))) == 9


def test_zero_iterations_keep_initial_coordinator(setup):
    _, _, snaps, ctask = setup
    feed = SnapshotFeed([1, 2, 3])
    for s in snaps.values():
        feed.publish(s)
    hp = ArsHyperParams(n_directions=2, top_b=1, max_iters=0)
    run = cars_train(ctask, hp, [FaultScenario(None)], 5, feed, ConcurrencySchedule())
    assert np.array_equal(run.state.theta, init_params(ctask.spec, 5).values)


def test_cars_records_versions_and_refresh(setup):
    _, _, snaps, ctask = setup
    feed = SnapshotFeed([1, 2, 3])
    for s in snaps.values():
        feed.publish(s)
    run = cars_train(ctask, HP, [FaultScenario(12, 0.05)], 5, feed, ConcurrencySchedule(1, 1))
    assert len(run.curve) == 2
    assert run.curve[0].extra == {"versions": {1: 1, 2: 1, 3: 1}, "refresh": True}
    again = cars_train(ctask, HP, [FaultScenario(12, 0.05)], 5, feed, ConcurrencySchedule(1, 1))
    assert np.array_equal(run.state.theta, again.state.theta)
    assert isinstance(run, CarsRun)
