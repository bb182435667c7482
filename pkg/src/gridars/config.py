"""Run configuration: schema, validation and loading.

Every key is validated before any compute starts; unknown keys are
rejected so that typos fail loudly.  Relative paths resolve against the
directory of the config file.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .ars import ArsHyperParams
from .env.surrogate import SurrogateParams
from .reward import RewardCoefficients

BUILTIN_PREFIX = "builtin:"
DATA_DIR = Path(__file__).parent / "data"
ENV_PREFIX = "GRIDARS_"


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ArsSection(_Strict):
    alpha: float = 1.0
    n_directions: int = 8
    noise_std: float = 2.0
    top_b: int = 4
    decay: float = 0.995
    max_iters: int = 100

    @model_validator(mode="after")
    def _check(self):
        errors = ArsHyperParams.problems(self)  # same rules as the learner
        if errors:
            raise ValueError("; ".join(errors))
        return self

    def hyper(self) -> ArsHyperParams:
        return ArsHyperParams(**self.model_dump())


class SurrogateSection(_Strict):
    v_stall: float = 0.7
    v_rec: float = 0.9
    k_stall: float = 30.0
    k_rec: float = 1.2
    stall_load_gain: float = 2.5
    hop_decay: float = 0.45
    dt_sim: float = 0.01
    dt_control: float = 0.1
    action_eps: float = 1e-3

    def params(self) -> SurrogateParams:
        return SurrogateParams(**self.model_dump())


class RewardSection(_Strict):
    c1: float = Field(5.0, gt=0)
    c2: float = Field(2.0, gt=0)
    c3: float = Field(1.0, gt=0)
    penalty: float = -1000.0
    area_weights: dict[int, float] = Field(default_factory=dict)
    default_area_weight: float = 5.0
    terminate_on_penalty: bool = True

    def coeffs(self) -> RewardCoefficients:
        return RewardCoefficients(**self.model_dump())


class PolicySection(_Strict):
    lstm_units: int = Field(16, ge=1)
    dense_units: int = Field(16, ge=1)
    action_bias: float = 0.0


class EpisodeSection(_Strict):
    t_fault: float = Field(1.0, ge=0)
    length: float = Field(10.0, gt=0)


class AreaSection(_Strict):
    id: int
    neighbors: list[int] | Literal["auto"] = "auto"
    fault_buses: list[int] = Field(min_length=1)
    durations: list[float] = Field(min_length=1)
    ars: ArsSection = Field(default_factory=ArsSection)

    @field_validator("durations")
    @classmethod
    def _nonneg(cls, v):
        if any(d < 0 for d in v):
            raise ValueError("fault durations must be >= 0")
        return v


class CoordinatorSection(_Strict):
    representatives: dict[int, list[int]] | None = None  # explicit c_i; otherwise drawn per area
    per_area: int = Field(1, ge=1)
    durations: list[float] = Field(default_factory=lambda: [0.0, 0.05, 0.08], min_length=1)
    action_space: Literal["unrestricted", "restricted"] = "unrestricted"
    mode: Literal["per_step", "event"] = "per_step"
    ars: ArsSection = Field(default_factory=ArsSection)


class ScheduleSection(_Strict):
    h_l: int = Field(10, ge=1)
    h_c: int = Field(10, ge=1)


class CentralizedSection(_Strict):
    fault_buses: list[int] | None = None  # default: union of the area training buses
    durations: list[float] | None = None  # default: the first area's durations
    ars: ArsSection = Field(default_factory=ArsSection)


class NeighborSection(_Strict):
    durations: list[float] = Field(default_factory=lambda: [0.05, 0.08, 0.1], min_length=1)
    nadir_threshold: float = 0.75
    small_fraction: float = Field(0.05, ge=0, le=1)
    max_per_area: int = Field(10, ge=1)


class ScenarioEntry(_Strict):
    bus: int | None = None
    duration: float = Field(0.0, ge=0)
    name: str | None = None


class RunConfig(_Strict):
    topology: str = BUILTIN_PREFIX + "toy3area.yaml"
    surrogate: SurrogateSection = Field(default_factory=SurrogateSection)
    reward: RewardSection = Field(default_factory=RewardSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    episode: EpisodeSection = Field(default_factory=EpisodeSection)
    areas: list[AreaSection] = Field(min_length=1)
    coordinator: CoordinatorSection = Field(default_factory=CoordinatorSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    centralized: CentralizedSection = Field(default_factory=CentralizedSection)
    neighbors: NeighborSection = Field(default_factory=NeighborSection)
    evaluation: dict[str, list[ScenarioEntry]] = Field(default_factory=dict)
    seed: int = 1
    workers: int = Field(1, ge=1)
    deterministic: bool = True
    output_dir: str = "runs/default"
    base_dir: str | None = None  # set by the loader; where relative paths resolve

    @model_validator(mode="after")
    def _areas_unique(self):
        ids = [a.id for a in self.areas]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate area ids {ids}")
        return self

    # -- paths ----------------------------------------------------------------

    def resolve(self, p: str) -> Path:
        if p.startswith(BUILTIN_PREFIX):
            return DATA_DIR / p[len(BUILTIN_PREFIX):]
        path = Path(p)
        if not path.is_absolute() and self.base_dir:
            path = Path(self.base_dir) / path
        return path

    @property
    def topology_path(self) -> Path:
        return self.resolve(self.topology)

    @property
    def area_ids(self) -> list[int]:
        return sorted(a.id for a in self.areas)

    def area(self, area_id: int) -> AreaSection:
        for a in self.areas:
            if a.id == area_id:
                return a
        raise KeyError(area_id)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", exclude={"base_dir"})

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_updates(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return parse_config_dict(data, self.base_dir)


def _format(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        out.append(f"{loc}: {e['msg']}")
    return out


def parse_config_dict(data: dict, base_dir=None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    data = dict(data)
    data.pop("base_dir", None)
    try:
        return RunConfig(**data, base_dir=None if base_dir is None else str(base_dir))
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def _coerce(text: str):
    return yaml.safe_load(text)


def env_overrides(environ=None) -> dict:
    """``GRIDARS_SEED=3`` or ``GRIDARS_SCHEDULE__H_C=5`` style overrides (``__`` nests)."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _coerce(value)
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(path, overrides: dict | None = None, environ=None) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc.strerror or exc}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: malformed YAML in {path}: {exc}"]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    data = _merge(data, env_overrides(environ))
    if overrides:
        data = _merge(data, overrides)
    return parse_config_dict(data, path.resolve().parent)


def example_config_path(name: str = "example.yaml") -> Path:
    return DATA_DIR / name
