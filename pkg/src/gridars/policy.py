"""LSTM policy: flat parameter layout, deterministic inference, action maps,
running observation normalization and checkpoint files.

Flat parameter layout (``LAYOUT_VERSION`` 1), in order:

    gate weights   (4H, I + H)   rows are the i, f, g, o gate blocks, columns
                                 are [obs..., hidden...]
    gate biases    (4H,)
    dense weights  (D, H)
    dense biases   (D,)
    head weights   (A, D)
    head biases    (A,)

for input size I, LSTM units H, dense units D and head arity A.  The network
is obs -> LSTM(H) -> dense(D, tanh) -> linear head.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from numba import njit

LAYOUT_VERSION = 1
VAR_FLOOR = 1e-8
ACTION_MIN = -0.2
ACTION_MAX = 0.0


class PolicyError(ValueError):
    """Rejected input to a policy operation."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint file."""


@dataclass(frozen=True)
class LstmPolicySpec:
    input_dim: int
    lstm_units: int = 16
    dense_units: int = 16
    head: str = "continuous"  # or "discrete"
    head_size: int = 1

    def __post_init__(self):
        for name in ("input_dim", "lstm_units", "dense_units", "head_size"):
            if int(getattr(self, name)) < 1:
                raise PolicyError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.head not in ("continuous", "discrete"):
            raise PolicyError(f"unknown head kind {self.head!r}")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        i, h, d, a = self.input_dim, self.lstm_units, self.dense_units, self.head_size
        return [(4 * h, i + h), (4 * h,), (d, h), (d,), (a, d), (a,)]

    @property
    def n_params(self) -> int:
        i, h, d, a = self.input_dim, self.lstm_units, self.dense_units, self.head_size
        return 4 * h * (i + h) + 4 * h + d * h + d + a * d + a

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "lstm_units": self.lstm_units,
            "dense_units": self.dense_units,
            "head": self.head,
            "head_size": self.head_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LstmPolicySpec":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layout_version: int = LAYOUT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    def __len__(self) -> int:
        return self.values.shape[0]

    def to_json(self) -> dict:
        return {"layout_version": self.layout_version, "values": [float(v) for v in self.values]}

    @classmethod
    def from_json(cls, d: dict) -> "ParameterVector":
        return cls(np.array(d["values"], dtype=np.float64), int(d["layout_version"]))


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, spec: LstmPolicySpec) -> "LstmState":
        return cls(np.zeros(spec.lstm_units), np.zeros(spec.lstm_units))


def init_params(spec: LstmPolicySpec, seed: int) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, biases included."""
    rng = np.random.default_rng(seed)
    i, h, d = spec.input_dim, spec.lstm_units, spec.dense_units
    fan_ins = [i + h, i + h, h, h, d, d]
    chunks = []
    for shape, fan_in in zip(spec.shapes, fan_ins):
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ParameterVector(np.concatenate(chunks))


class LstmWeights(NamedTuple):
    gates_w: np.ndarray  # (R, 4H, I+H)
    gates_b: np.ndarray  # (R, 4H)
    dense_w: np.ndarray  # (R, D, H)
    dense_b: np.ndarray  # (R, D)
    head_w: np.ndarray  # (R, A, D)
    head_b: np.ndarray  # (R, A)


def unpack(spec: LstmPolicySpec, rows: np.ndarray) -> LstmWeights:
    """Split a (R, n_params) block of parameter rows into layer tensors."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != spec.n_params:
        raise PolicyError(f"expected {spec.n_params} parameters, got {rows.shape[1]}")
    r = rows.shape[0]
    out = []
    pos = 0
    for shape in spec.shapes:
        size = int(np.prod(shape))
        out.append(np.ascontiguousarray(rows[:, pos:pos + size].reshape((r,) + shape)))
        pos += size
    return LstmWeights(*out)


@njit(cache=True, nogil=True)
def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


@njit(cache=True, nogil=True)
def lstm_step_kernel(gw, gb, dw, db, hw, hb, rows, h, c, x, out, h_new, c_new):
    """One LSTM + dense + head evaluation for each batch row.

    ``rows[b]`` selects the parameter row used by batch entry ``b``; every
    entry is computed by the same scalar loop so results do not depend on
    the batch composition.
    """
    n_batch = x.shape[0]
    n_in = x.shape[1]
    n_h = h.shape[1]
    n_d = dw.shape[1]
    n_a = hw.shape[1]
    pre = np.empty(4 * n_h)
    dense = np.empty(n_d)
    for b in range(n_batch):
        r = rows[b]
        for q in range(4 * n_h):
            acc = 0.0
            for k in range(n_in):
                acc += gw[r, q, k] * x[b, k]
            for k in range(n_h):
                acc += gw[r, q, n_in + k] * h[b, k]
            pre[q] = acc + gb[r, q]
        for u in range(n_h):
            ig = _sigmoid(pre[u])
            fg = _sigmoid(pre[n_h + u])
            gg = math.tanh(pre[2 * n_h + u])
            og = _sigmoid(pre[3 * n_h + u])
            cn = fg * c[b, u] + ig * gg
            c_new[b, u] = cn
            h_new[b, u] = og * math.tanh(cn)
        for u in range(n_d):
            acc = 0.0
            for k in range(n_h):
                acc += dw[r, u, k] * h_new[b, k]
            dense[u] = math.tanh(acc + db[r, u])
        for a in range(n_a):
            acc = 0.0
            for k in range(n_d):
                acc += hw[r, a, k] * dense[k]
            out[b, a] = acc + hb[r, a]


def forward_batch(weights: LstmWeights, rows: np.ndarray, h: np.ndarray, c: np.ndarray,
                  x: np.ndarray):
    n_batch = x.shape[0]
    out = np.empty((n_batch, weights.head_w.shape[1]))
    h_new = np.empty_like(h)
    c_new = np.empty_like(c)
    lstm_step_kernel(*weights, rows, h, c, x, out, h_new, c_new)
    return out, h_new, c_new


def forward(spec: LstmPolicySpec, params: ParameterVector | np.ndarray, state: LstmState,
            obs) -> tuple[np.ndarray, LstmState]:
    values = params.values if isinstance(params, ParameterVector) else np.asarray(params, float)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (spec.input_dim,):
        raise PolicyError(f"observation length {obs.shape} does not match input_dim {spec.input_dim}")
    if values.shape != (spec.n_params,):
        raise PolicyError(f"parameter length {values.shape[0]} does not match spec ({spec.n_params})")
    weights = unpack(spec, values[None, :])
    out, h, c = forward_batch(weights, np.zeros(1, dtype=np.int64), state.hidden[None, :],
                              state.cell[None, :], obs[None, :])
    return out[0], LstmState(h[0], c[0])


def map_action_continuous(raw) -> np.ndarray:
    """u = 0.1 * (tanh(raw) - 1), which always lies in [-0.2, 0]."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise PolicyError("non-finite raw policy output")
    return 0.1 * (np.tanh(raw) - 1.0)


def map_action_discrete(raw) -> int:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise PolicyError("empty score vector")
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(raw))


@dataclass(frozen=True, eq=False)
class RunningNormalizer:
    """Welford running mean/variance; value semantics (updates return new objects)."""

    dims: int
    n: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            object.__setattr__(self, "mean", np.zeros(self.dims))
        if self.m2 is None:
            object.__setattr__(self, "m2", np.zeros(self.dims))

    @property
    def variance(self) -> np.ndarray:
        if self.n == 0:
            return np.ones(self.dims)
        return self.m2 / self.n

    @property
    def scale(self) -> np.ndarray:
        """Per-dimension divisor; 1 where there is no data or the variance is floored."""
        if self.n == 0:
            return np.ones(self.dims)
        var = self.m2 / self.n
        return np.where(var < VAR_FLOOR, 1.0, np.sqrt(np.maximum(var, VAR_FLOOR)))

    def update(self, obs) -> "RunningNormalizer":
        return normalizer_update(self, obs)

    def merge(self, n: int, mean: np.ndarray, m2: np.ndarray) -> "RunningNormalizer":
        """Fold in a batch summarized by (count, mean, sum of squared deviations)."""
        if n == 0:
            return self
        if self.n == 0:
            return RunningNormalizer(self.dims, int(n), np.array(mean, float), np.array(m2, float))
        total = self.n + n
        delta = mean - self.mean
        new_mean = self.mean + delta * (n / total)
        new_m2 = self.m2 + m2 + delta * delta * (self.n * n / total)
        return RunningNormalizer(self.dims, total, new_mean, new_m2)

    def to_json(self) -> dict:
        return {"dims": self.dims, "n": self.n, "mean": [float(v) for v in self.mean],
                "m2": [float(v) for v in self.m2]}

    @classmethod
    def from_json(cls, d: dict) -> "RunningNormalizer":
        return cls(int(d["dims"]), int(d["n"]), np.array(d["mean"], float), np.array(d["m2"], float))


def normalizer_update(norm: RunningNormalizer, obs) -> RunningNormalizer:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (norm.dims,):
        raise PolicyError(f"observation length {obs.shape} does not match normalizer dims {norm.dims}")
    n = norm.n + 1
    delta = obs - norm.mean
    mean = norm.mean + delta / n
    m2 = norm.m2 + delta * (obs - mean)
    return RunningNormalizer(norm.dims, n, mean, m2)


def batch_moments(x: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """Two-pass (count, mean, m2) of the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return 0, np.zeros(x.shape[1]), np.zeros(x.shape[1])
    mean = x.mean(axis=0)
    dev = x - mean
    return x.shape[0], mean, (dev * dev).sum(axis=0)


def normalize(norm: RunningNormalizer, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != norm.dims:
        raise PolicyError(f"observation length {obs.shape[-1]} does not match normalizer dims {norm.dims}")
    return (obs - norm.mean) / norm.scale


# -- checkpoint files -------------------------------------------------------

def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def checkpoint_payload(spec: LstmPolicySpec, params: ParameterVector,
                       normalizer: RunningNormalizer, meta: dict | None = None) -> dict:
    if len(params) != spec.n_params:
        raise PolicyError(f"parameter length {len(params)} does not match spec ({spec.n_params})")
    body = {
        "format": "gridars-policy",
        "layout_version": params.layout_version,
        "spec": spec.to_dict(),
        "params": params.to_json()["values"],
        "normalizer": normalizer.to_json(),
        "meta": meta or {},
    }
    body["sha256"] = _digest(body)
    return body


def parse_checkpoint(body: Any) -> tuple[LstmPolicySpec, ParameterVector, RunningNormalizer, dict]:
    if not isinstance(body, dict) or body.get("format") != "gridars-policy":
        raise CheckpointError("not a policy checkpoint")
    claimed = body.get("sha256")
    unsigned = {k: v for k, v in body.items() if k != "sha256"}
    if claimed != _digest(unsigned):
        raise CheckpointError("checksum mismatch (corrupt checkpoint)")
    version = body.get("layout_version")
    if version != LAYOUT_VERSION:
        raise CheckpointError(f"layout_version {version} is not supported (expected {LAYOUT_VERSION})")
    try:
        spec = LstmPolicySpec.from_dict(body["spec"])
        params = ParameterVector(np.array(body["params"], dtype=np.float64), version)
        norm = RunningNormalizer.from_json(body["normalizer"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if len(params) != spec.n_params or norm.dims != spec.input_dim:
        raise CheckpointError("checkpoint sizes do not match its policy spec")
    return spec, params, norm, body.get("meta", {})


def save_checkpoint(path, spec, params, normalizer, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = checkpoint_payload(spec, params, normalizer, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(body))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        body = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(body)
