import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridars.config import DATA_DIR
from gridars.env.surrogate import BatchGrid, FaultScenario, GridModel
from gridars.env.topology import TopologyError, load_topology, topology_from_dict
from gridars.neighbors import ProbeTrace, discover_neighbors, probe_area, select_neighbors

# pinned after the first run on the shipped toy grid
PINNED = {1: (), 2: (13, 18), 3: (11,)}


@pytest.fixture(scope="module")
def model():
    return GridModel(load_topology(DATA_DIR / "toy3area.yaml"))


@pytest.fixture(scope="module")
def reports(model):
    return discover_neighbors(model)


def test_pinned_neighbor_sets(reports):
    assert {a: r.selected for a, r in reports.items()} == PINNED
    assert reports[1].selected == () and reports[2].selected and reports[3].selected


def test_selected_buses_are_foreign_deep_violators(model, reports):
    topo = model.topology
    for area, rep in reports.items():
        for bus in rep.selected:
            assert topo.area_of(bus) != area
            nadir = dict(rep.violating[topo.area_of(bus)])[bus]
            assert nadir < 0.75


def test_zero_duration_probe_is_flat(model):
    traces = probe_area(model, 2, durations=(0.0,))
    assert all(np.array_equal(p.V, np.ones_like(p.V)) for p in traces)


def test_probe_matches_direct_simulation(model):
    traces = probe_area(model, 3, durations=(0.08,))
    p = traces[0]
    sc = FaultScenario(p.fault_bus, 0.08)
    grid = BatchGrid(model, [sc])
    rows = [grid.V[0].copy()]
    for _ in range(model.steps_per_episode(sc)):
        grid.apply_actions(np.zeros((1, model.n_loads)))
        grid.advance()
        rows.append(grid.V[0].copy())
    assert np.array_equal(p.V, np.array(rows))


def test_isolated_area_sees_flat_foreign_traces():
    topo = topology_from_dict({
        "buses": [1, 2, 3, 4], "lines": [[1, 2], [3, 4]], "areas": {1: [1, 2], 2: [3, 4]},
        "loads": {1: [{"bus": 1, "demand": 4.0, "sag": 0.3}], 2: [{"bus": 3, "demand": 4.0, "sag": 0.3}]}})
    m = GridModel(topo)
    traces = probe_area(m, 1, durations=(0.1,))
    foreign = [topo.index(3), topo.index(4)]
    assert np.all(traces[0].V[:, foreign] == 1.0)
    assert discover_neighbors(m)[1].selected == ()


def test_probe_rejects_unknown_area(model):
    with pytest.raises(TopologyError):
        probe_area(model, 7)


def _synthetic(nadirs, area_size=4):
    """Area 1 probes; area 2 buses follow a V-shaped dip to the given nadirs."""
    buses = [1] + list(range(2, 2 + area_size))
    topo = topology_from_dict({"buses": buses, "lines": [[buses[i], buses[i + 1]] for i in range(len(buses) - 1)],
                               "areas": {1: [1], 2: buses[1:]}})
    n = 101
    V = np.ones((n, len(buses)))
    for j, nadir in enumerate(nadirs, start=1):
        V[12:30, j] = nadir  # just after clearing at 1.1 s
    return topo, [ProbeTrace(1, 0.1, 1.1, V)]


def test_no_violations_gives_empty_set():
    topo, traces = _synthetic([1.0, 1.0, 1.0, 1.0])
    assert select_neighbors(traces, topo, 1, small_fraction=0.0).selected == ()


def test_deep_bus_selected_shallow_bus_excluded():
    topo, traces = _synthetic([0.6, 0.8, 1.0, 1.0])
    rep = select_neighbors(traces, topo, 1, small_fraction=0.0)
    assert rep.selected == (2,)
    assert dict(rep.violating[2])[3] == pytest.approx(0.8)


def test_small_fraction_filter():
    topo, traces = _synthetic([0.6, 1.0, 1.0, 1.0])
    # one violating bus is within the tolerated handful
    assert select_neighbors(traces, topo, 1).selected == ()


@settings(max_examples=30)
@given(st.lists(st.floats(0.3, 1.0), min_size=4, max_size=4), st.floats(0.5, 0.9), st.floats(0.0, 0.2))
def test_threshold_monotone(nadirs, thr, bump):
    topo, traces = _synthetic(nadirs)
    lo = set(select_neighbors(traces, topo, 1, nadir_threshold=thr, small_fraction=0.0).selected)
    hi = set(select_neighbors(traces, topo, 1, nadir_threshold=thr + bump, small_fraction=0.0).selected)
    assert lo <= hi


def test_report_serializes(reports):
    d = reports[2].to_dict()
    assert d["selected"] == [13, 18] and d["area"] == 2
