"""Key localization by per-unit l1 ranking, pooled sampling and baselines.

A key is built per hidden layer.  For each selected unit (a dense neuron or
a conv filter) it holds the unit's incoming weights, its bias, and every
weight of the next layer that reads the unit's output.  Clearing those
entries disconnects the unit in both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, KeyValidationError, ParseError
from .network import Conv, Dense, NetworkSpec, ParameterStore, index_map, model_hash
from .serialize import canonical_json, parse_json

STRATEGIES = ("top", "pool-sample", "random", "bottom")
KEY_VERSION = 1
_ROUND_GUARD = 1e-9


@dataclass(frozen=True)
class KeySpec:
    """How a key is selected.

    Parameters
    ----------
    rho : float
        Fraction of units chosen in each hidden layer.
    pool_fraction : float, optional
        Candidate pool for ``pool-sample``; defaults to ``rho``.
    strategy : str
        One of ``top``, ``pool-sample``, ``random``, ``bottom``.
    seed : int
        Generator seed for the sampling strategies.
    """

    rho: float = 0.05
    pool_fraction: float | None = None
    strategy: str = "top"
    seed: int = 0
    granularity: str = field(default="unit")

    def __post_init__(self):
        if self.pool_fraction is None:
            object.__setattr__(self, "pool_fraction", self.rho)
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown key strategy {self.strategy!r}")
        if not 0 < self.rho <= self.pool_fraction <= 1:
            raise ContractError(f"need 0 < rho <= pool_fraction <= 1, got {self.rho}, {self.pool_fraction}")

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "pool_fraction": self.pool_fraction,
            "strategy": self.strategy,
            "seed": self.seed,
            "granularity": self.granularity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeySpec":
        return cls(float(d["rho"]), float(d["pool_fraction"]), str(d["strategy"]), int(d["seed"]),
                   str(d.get("granularity", "unit")))


@dataclass(frozen=True, eq=False)
class Key:
    """Index/value pairs plus the metadata that produced them."""

    indices: np.ndarray
    values: np.ndarray
    unit_list: tuple[tuple[int, int], ...]
    spec: KeySpec
    base_model_hash: str

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        val = np.array(self.values, dtype=np.float64)
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "unit_list", tuple((int(a), int(b)) for a, b in self.unit_list))
        check_key_structure(self)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def __len__(self) -> int:
        return self.indices.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Key):
            return NotImplemented
        return (
            self.indices.tobytes() == other.indices.tobytes()
            and self.values.tobytes() == other.values.tobytes()
            and self.unit_list == other.unit_list
            and self.spec == other.spec
            and self.base_model_hash == other.base_model_hash
        )

    def with_values(self, values) -> "Key":
        return Key(self.indices, values, self.unit_list, self.spec, self.base_model_hash)


def check_key_structure(key: Key) -> None:
    """Raise KeyValidationError unless indices are nonempty, strictly increasing and aligned with values."""
    if key.indices.ndim != 1 or key.indices.size == 0:
        raise KeyValidationError("key has no entries")
    if key.values.shape != key.indices.shape:
        raise KeyValidationError("key indices and values differ in length")
    if np.any(np.diff(key.indices) <= 0):
        raise KeyValidationError("key indices must be strictly increasing and unique")
    if key.indices[0] < 0:
        raise KeyValidationError("key index below zero")
    if not np.all(np.isfinite(key.values)):
        raise KeyValidationError("key values must be finite")


def units_to_select(rho: float, units: int) -> int:
    """ceil(rho * units), clamped to [1, units]; a tiny guard absorbs float noise such as 0.05 * 20."""
    return min(units, max(1, math.ceil(rho * units - _ROUND_GUARD)))


def unit_l1_norms(params: ParameterStore, layer: int) -> np.ndarray:
    """Sum of absolute incoming weights per neuron (dense) or filter (conv)."""
    w = params.weight(layer)
    return np.abs(w).reshape(w.shape[0], -1).sum(axis=1)


def unit_entry_indices(spec: NetworkSpec, layer: int, unit: int) -> np.ndarray:
    """Flat indices a unit contributes to a key: incoming weights, bias, successor weights."""
    if not 0 <= layer < spec.depth - 1:
        raise ContractError(f"layer {layer} is not a hidden layer")
    this = spec.layers[layer]
    w0, b0, _ = spec.offsets(layer)
    out = [np.arange(w0 + unit * this.fan_in, w0 + (unit + 1) * this.fan_in), np.array([b0 + unit])]
    nxt = spec.layers[layer + 1]
    n0, _, _ = spec.offsets(layer + 1)
    if isinstance(nxt, Dense):
        # a conv feature map is flattened channel-major, so a filter owns a contiguous block of columns
        block = int(np.prod(spec.activation_shape(layer)[1:])) if isinstance(this, Conv) else 1
        cols = np.arange(unit * block, (unit + 1) * block)
    else:
        kk = nxt.k * nxt.k
        cols = np.arange(unit * kk, (unit + 1) * kk)
    rows = np.arange(nxt.units)[:, None] * nxt.fan_in
    out.append((n0 + rows + cols[None, :]).ravel())
    return np.concatenate(out)


def key_indices_for_units(spec: NetworkSpec, unit_list) -> np.ndarray:
    parts = [unit_entry_indices(spec, layer, unit) for layer, unit in unit_list]
    return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


def _rank(norms: np.ndarray, descending: bool) -> np.ndarray:
    # lexsort keys are applied last-first: primary by norm, ties by lower index
    order_key = -norms if descending else norms
    return np.lexsort((np.arange(norms.size), order_key))


def select_units(params: ParameterStore, spec: KeySpec) -> tuple[tuple[int, int], ...]:
    """Per hidden layer unit choice for any strategy."""
    net = params.spec
    if net.depth < 2:
        raise ContractError("key localization needs at least two layers")
    rng = np.random.default_rng(spec.seed)
    chosen: list[tuple[int, int]] = []
    for layer in range(net.depth - 1):
        norms = unit_l1_norms(params, layer)
        units = norms.size
        n = units_to_select(spec.rho, units)
        if spec.strategy == "top":
            picked = _rank(norms, descending=True)[:n]
        elif spec.strategy == "bottom":
            picked = _rank(norms, descending=False)[:n]
        elif spec.strategy == "random":
            picked = rng.choice(units, size=n, replace=False)
        else:
            pool_size = units_to_select(spec.pool_fraction, units)
            if pool_size < n:
                raise ContractError(f"layer {layer}: pool of {pool_size} units cannot supply {n}")
            pool = _rank(norms, descending=True)[:pool_size]
            picked = rng.choice(pool, size=n, replace=False)
        chosen.extend((layer, int(u)) for u in np.sort(picked))
    return tuple(chosen)


def locked_hash_for(params: ParameterStore, indices: np.ndarray) -> str:
    """Hash of the model with ``indices`` cleared, i.e. of the artifact a key unlocks."""
    flat = params.flat.copy()
    flat[indices] = 0.0
    return model_hash(params.with_flat(flat))


def build_key(params: ParameterStore, spec: KeySpec) -> Key:
    units = select_units(params, spec)
    idx = key_indices_for_units(params.spec, units)
    return Key(idx, params.flat[idx], units, spec, locked_hash_for(params, idx))


def localize_key(params: ParameterStore, spec: KeySpec | None = None) -> Key:
    """Top-``rho`` units by l1 norm in every hidden layer."""
    spec = spec or KeySpec()
    if spec.strategy != "top":
        raise ContractError("localize_key expects strategy='top'")
    return build_key(params, spec)


def sample_key_pool(params: ParameterStore, spec: KeySpec) -> Key:
    """Sample ``rho`` units uniformly from the top ``pool_fraction`` of each hidden layer."""
    if spec.strategy != "pool-sample":
        raise ContractError("sample_key_pool expects strategy='pool-sample'")
    return build_key(params, spec)


def baseline_key(params: ParameterStore, spec: KeySpec) -> Key:
    """Random or smallest-norm units; the comparison baselines."""
    if spec.strategy not in ("random", "bottom"):
        raise ContractError("baseline_key expects strategy 'random' or 'bottom'")
    return build_key(params, spec)


def validate_key_for(key: Key, net: NetworkSpec) -> None:
    """Check that indices fit the network and exactly cover the declared units."""
    if key.indices[-1] >= net.param_count:
        raise KeyValidationError(f"key index {int(key.indices[-1])} exceeds parameter count {net.param_count}")
    try:
        expected = key_indices_for_units(net, key.unit_list)
    except (ContractError, IndexError) as exc:
        raise KeyValidationError(f"key unit list does not fit the network: {exc}") from exc
    if expected.size != key.indices.size or np.any(expected != key.indices):
        raise KeyValidationError("key entries do not match the weights of its unit list")


def key_fraction(key: Key, net: NetworkSpec) -> float:
    return key.indices.size / net.param_count


def unit_fractions(key: Key, net: NetworkSpec) -> dict[int, float]:
    """Selected units divided by layer width, for every hidden layer."""
    counts: dict[int, int] = {layer: 0 for layer in range(net.depth - 1)}
    for layer, _ in key.unit_list:
        counts[layer] += 1
    return {layer: c / net.layers[layer].units for layer, c in counts.items()}


def encode_key(key: Key) -> bytes:
    payload = {
        "version": KEY_VERSION,
        "base_model_hash": key.base_model_hash,
        "spec": key.spec.to_dict(),
        "unit_list": [list(u) for u in key.unit_list],
        "entries": [[i, v] for i, v in key.entries],
    }
    return canonical_json(payload)


def decode_key(payload: bytes | str) -> Key:
    d = parse_json(payload, "key file")
    try:
        if d["version"] != KEY_VERSION:
            raise ParseError(f"unsupported key version {d['version']}")
        entries = d["entries"]
        if not isinstance(entries, list) or any(len(e) != 2 for e in entries):
            raise ParseError("key entries must be [index, value] pairs")
        indices = np.array([int(e[0]) for e in entries], dtype=np.int64)
        values = np.array([float(e[1]) for e in entries], dtype=np.float64)
        return Key(indices, values, tuple(tuple(u) for u in d["unit_list"]), KeySpec.from_dict(d["spec"]),
                   str(d["base_model_hash"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, KeyValidationError):
            raise
        raise ParseError(f"malformed key file: {exc}") from exc
