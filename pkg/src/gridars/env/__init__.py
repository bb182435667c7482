from .observe import AreaView, area_view, observe_area, observe_coordinator
from .profile import (DEFAULT_PROFILE, ProfileCheck, RecoveryProfile, check_profile_violation,
                      late_violation)
from .surrogate import (BatchGrid, FaultScenario, GridModel, GridState, SimulationError,
                        SurrogateParams, reset, step)
from .topology import GridTopology, LoadBus, TopologyError, build_coupling, load_topology, topology_from_dict

__all__ = [
    "AreaView", "BatchGrid", "DEFAULT_PROFILE", "FaultScenario", "GridModel", "GridState", "GridTopology",
    "LoadBus", "ProfileCheck", "RecoveryProfile", "SimulationError", "SurrogateParams", "TopologyError",
    "area_view", "build_coupling", "check_profile_violation", "late_violation", "load_topology",
    "observe_area", "observe_coordinator", "reset", "step", "topology_from_dict",
]
