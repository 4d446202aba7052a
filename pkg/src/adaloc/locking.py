"""Lock (zero key coordinates), unlock (restore them), reference model, key refresh."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AdaptabilityViolation, FingerprintError, StaleKeyError
from .keying import Key, locked_hash_for, validate_key_for
from .network import NetworkSpec, ParameterStore, decode_model, encode_model, model_hash


@dataclass(frozen=True)
class LockedModel:
    """A locked parameter store and the fingerprint binding it to its key.

    ``fingerprint`` is the hash of the locked parameters, which is also the
    ``base_model_hash`` of every key (original or refreshed) that unlocks it.
    """

    params: ParameterStore
    fingerprint: str
    source_tag: str = "pretrained"

    def to_bytes(self) -> bytes:
        return encode_model(self.params, {"fingerprint": self.fingerprint, "source_tag": self.source_tag})

    @classmethod
    def from_bytes(cls, payload: bytes) -> "LockedModel":
        params, header = decode_model(payload)
        if params.tag != "locked" or "fingerprint" not in header:
            raise FingerprintError("model file is not a locked model")
        if model_hash(params) != header["fingerprint"]:
            raise FingerprintError("locked model fingerprint does not match its parameters")
        return cls(params, header["fingerprint"], header.get("source_tag", "pretrained"))


def lock(params: ParameterStore | LockedModel, key: Key) -> LockedModel:
    """Zero every key-indexed coordinate.

    Locking an already locked model with the same key is a no-op.
    """
    if isinstance(params, LockedModel):
        relocked = lock(params.params, key)
        return LockedModel(relocked.params, relocked.fingerprint, params.source_tag)
    validate_key_for(key, params.spec)
    if locked_hash_for(params, key.indices) != key.base_model_hash:
        raise StaleKeyError("key was not derived from this model")
    flat = params.flat.copy()
    flat[key.indices] = 0.0
    locked = params.with_flat(flat, tag="locked")
    return LockedModel(locked, model_hash(locked), params.tag)


def unlock(locked: LockedModel, key: Key, tag: str | None = None) -> ParameterStore:
    """Write the key's stored values back into the locked coordinates."""
    if key.base_model_hash != locked.fingerprint:
        raise FingerprintError(
            f"fingerprint mismatch: key unlocks {key.base_model_hash[:12]}, model is {locked.fingerprint[:12]}"
        )
    validate_key_for(key, locked.params.spec)
    flat = locked.params.flat.copy()
    flat[key.indices] = key.values
    return locked.params.with_flat(flat, tag=tag or locked.source_tag)


def check_complete(key: Key, spec: NetworkSpec) -> None:
    """Raise KeyValidationError if the key misses any coordinate of its units."""
    validate_key_for(key, spec)


def reference_model(spec: NetworkSpec, params: ParameterStore) -> ParameterStore:
    """All weights and hidden biases zero, final bias kept: a constant predictor."""
    flat = np.zeros(spec.param_count)
    _, b0, end = spec.offsets(spec.depth - 1)
    flat[b0:end] = params.flat[b0:end]
    return ParameterStore(spec, flat, tag="reference")


def refresh_key(adapted: ParameterStore, old_key: Key) -> Key:
    """Read new key values from a key-only adapted model.

    The adapted model must agree with the locked base everywhere outside the
    key, which is exactly when clearing its key coordinates reproduces the
    base's hash.
    """
    validate_key_for(old_key, adapted.spec)
    if locked_hash_for(adapted, old_key.indices) != old_key.base_model_hash:
        raise AdaptabilityViolation("adapted parameters changed outside the key's index set")
    return old_key.with_values(adapted.flat[old_key.indices])


def drift_outside(a: ParameterStore, b: ParameterStore, key: Key) -> np.ndarray:
    """Indices outside the key where two stores differ bitwise."""
    mask = np.ones(a.d, dtype=bool)
    mask[key.indices] = False
    differs = a.flat.view(np.uint64) != b.flat.view(np.uint64)
    return np.flatnonzero(differs & mask)

