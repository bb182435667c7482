import copy

import pytest

from gridars.config import parse_config_dict

NEIGHBORS = {1: [], 2: [13, 18], 3: [11]}


def tiny_config_dict(areas=(1, 2, 3), out_dir="run", **over):
    """A few seconds of training on the toy grid."""
    buses = {1: [2, 4], 2: [8, 12], 3: [14, 18]}
    ars = {"alpha": 0.05, "n_directions": 2, "noise_std": 0.05, "top_b": 1, "max_iters": 12}
    d = {
        "policy": {"lstm_units": 4, "dense_units": 4, "action_bias": 3.0},
        "episode": {"t_fault": 1.0, "length": 6.0},
        "areas": [{"id": a, "neighbors": NEIGHBORS[a], "fault_buses": buses[a], "durations": [0.0, 0.08],
                   "ars": dict(ars)} for a in areas],
        "coordinator": {"per_area": 1, "durations": [0.0, 0.08], "ars": dict(ars, max_iters=8)},
        "schedule": {"h_l": 5, "h_c": 3},
        "centralized": {"ars": dict(ars)},
        "evaluation": {"heldout": [{"bus": 5, "duration": 0.1}, {"bus": 9, "duration": 0.1}]},
        "seed": 3,
        "output_dir": out_dir,
    }
    for k, v in over.items():
        d[k] = v
    return copy.deepcopy(d)


@pytest.fixture
def tiny_config(tmp_path):
    def make(**kw):
        if "topology" not in kw:
            kw.setdefault("out_dir", str(tmp_path / "run"))
        return parse_config_dict(tiny_config_dict(**kw), tmp_path)
    return make


# -- acceptance reporting: one line per criterion at the end of the session -----------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n = mark.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[n] = ("PASS" if call.excinfo is None else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}" + (f"  ({detail})" if detail else ""))
