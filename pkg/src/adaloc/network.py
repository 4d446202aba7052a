"""Feed-forward ReLU architectures and their flat parameter vectors.

Flat index convention
---------------------
Parameters are laid out layer by layer.  Within a layer the weights come
first, in row-major order of the weight array, followed by the biases.  A
dense layer's weight has shape (out, in); a convolution's has shape
(c_out, c_in, k, k) and its "column" coordinate is the row-major index into
the trailing (c_in, k, k) block.  Key files store indices in this layout.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from . import autograd as ag
from .errors import DimensionError, ParseError
from .serialize import canonical_json, parse_json, sha256_hex

TAGS = ("initial", "pretrained", "full-finetuned", "key-finetuned", "locked", "reference")
MODEL_MAGIC = b"ADLM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "dense"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_features, self.in_features)

    @property
    def units(self) -> int:
        return self.out_features

    @property
    def fan_in(self) -> int:
        return self.in_features

    def to_dict(self) -> dict:
        return {"kind": "dense", "in": self.in_features, "out": self.out_features}


@dataclass(frozen=True)
class Conv:
    c_in: int
    c_out: int
    k: int

    kind = "conv"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def units(self) -> int:
        return self.c_out

    @property
    def fan_in(self) -> int:
        return self.c_in * self.k * self.k

    def to_dict(self) -> dict:
        return {"kind": "conv", "c_in": self.c_in, "c_out": self.c_out, "k": self.k}


Layer = Union[Dense, Conv]


def _layer_from_dict(d: dict) -> Layer:
    kind = d.get("kind")
    if kind == "dense":
        return Dense(int(d["in"]), int(d["out"]))
    if kind == "conv":
        return Conv(int(d["c_in"]), int(d["c_out"]), int(d["k"]))
    raise ParseError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: ReLU after every hidden layer, linear final layer.

    ``input_shape`` is ``(dim,)`` for dense inputs or ``(channels, H, W)``
    when the first layer is a convolution.  A dense layer that follows a
    convolution consumes the flattened (channel, row, col) feature map.
    """

    input_shape: tuple[int, ...]
    class_count: int
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            cur = shapes[-1]
            if isinstance(layer, Dense):
                if int(np.prod(cur)) != layer.in_features:
                    raise DimensionError(
                        f"layer {i}: dense expects {layer.in_features} inputs, receives shape {cur}"
                    )
                shapes.append((layer.out_features,))
            else:
                if len(cur) != 3 or cur[0] != layer.c_in:
                    raise DimensionError(f"layer {i}: conv expects {layer.c_in} channels, receives shape {cur}")
                if layer.k > cur[1] or layer.k > cur[2]:
                    raise DimensionError(f"layer {i}: kernel {layer.k} exceeds feature map {cur[1:]}")
                shapes.append((layer.c_out, cur[1] - layer.k + 1, cur[2] - layer.k + 1))
        if not isinstance(self.layers[-1], Dense) or self.layers[-1].out_features != self.class_count:
            raise DimensionError("final layer must be dense with class_count outputs")
        object.__setattr__(self, "_shapes", tuple(shapes))
        offsets = []
        pos = 0
        for layer in self.layers:
            w_size = int(np.prod(layer.weight_shape))
            offsets.append((pos, pos + w_size, pos + w_size + layer.units))
            pos += w_size + layer.units
        object.__setattr__(self, "_offsets", tuple(offsets))
        object.__setattr__(self, "_d", pos)

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], class_count: int) -> "NetworkSpec":
        widths = [input_dim, *hidden, class_count]
        return cls((input_dim,), class_count, tuple(Dense(a, b) for a, b in zip(widths[:-1], widths[1:])))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def param_count(self) -> int:
        return self._d

    def activation_shape(self, layer: int) -> tuple[int, ...]:
        """Shape of the output of ``layer`` (``-1`` gives the input shape)."""
        return self._shapes[layer + 1]

    def offsets(self, layer: int) -> tuple[int, int, int]:
        """(weight start, bias start, layer end) in the flat vector."""
        return self._offsets[layer]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(tuple(d["input_shape"]), int(d["class_count"]), tuple(_layer_from_dict(x) for x in d["layers"]))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed network spec: {exc}") from exc


class ParameterStore:
    """Immutable flat parameter vector with per-layer views.

    Equality is bit-exact on the values and ignores the tag.
    """

    __slots__ = ("spec", "flat", "tag")

    def __init__(self, spec: NetworkSpec, flat, tag: str = "initial"):
        arr = np.array(flat, dtype=np.float64).ravel()
        if arr.size != spec.param_count:
            raise DimensionError(f"expected {spec.param_count} parameters, got {arr.size}")
        if tag not in TAGS:
            raise ValueError(f"unknown parameter tag {tag!r}")
        arr.setflags(write=False)
        self.spec = spec
        self.flat = arr
        self.tag = tag

    @classmethod
    def from_layers(cls, spec: NetworkSpec, weights: Sequence, biases: Sequence, tag: str = "initial") -> "ParameterStore":
        parts = []
        for layer, w, b in zip(spec.layers, weights, biases, strict=True):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != layer.weight_shape or b.shape != (layer.units,):
                raise DimensionError(f"layer arrays {w.shape}/{b.shape} do not match {layer}")
            parts.extend([w.ravel(), b])
        return cls(spec, np.concatenate(parts), tag)

    @property
    def d(self) -> int:
        return self.flat.size

    def weight(self, layer: int) -> np.ndarray:
        w0, b0, _ = self.spec.offsets(layer)
        return self.flat[w0:b0].reshape(self.spec.layers[layer].weight_shape)

    def bias(self, layer: int) -> np.ndarray:
        _, b0, end = self.spec.offsets(layer)
        return self.flat[b0:end]

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.weight(i).copy(), self.bias(i).copy()) for i in range(self.spec.depth)]

    def with_flat(self, flat, tag: str | None = None) -> "ParameterStore":
        return ParameterStore(self.spec, flat, self.tag if tag is None else tag)

    def retag(self, tag: str) -> "ParameterStore":
        return ParameterStore(self.spec, self.flat, tag)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterStore):
            return NotImplemented
        return self.spec == other.spec and self.flat.tobytes() == other.flat.tobytes()

    def __hash__(self):
        return hash(model_hash(self))

    def __repr__(self) -> str:
        return f"ParameterStore(d={self.d}, tag={self.tag!r})"


def index_map(spec: NetworkSpec, coordinate: tuple[int, str, int, int]) -> int:
    """Flat index of ``(layer, role, row, col)``; role is "weight" or "bias"."""
    layer, role, row, col = coordinate
    if not 0 <= layer < spec.depth:
        raise IndexError(f"layer {layer} out of range")
    spec_layer = spec.layers[layer]
    w0, b0, _ = spec.offsets(layer)
    if role == "weight":
        if not (0 <= row < spec_layer.units and 0 <= col < spec_layer.fan_in):
            raise IndexError(f"weight coordinate ({row}, {col}) out of range for layer {layer}")
        return w0 + row * spec_layer.fan_in + col
    if role == "bias":
        if not 0 <= row < spec_layer.units or col != 0:
            raise IndexError(f"bias coordinate ({row}, {col}) out of range for layer {layer}")
        return b0 + row
    raise IndexError(f"unknown role {role!r}")


def index_coordinate(spec: NetworkSpec, index: int) -> tuple[int, str, int, int]:
    """Inverse of :func:`index_map`."""
    if not 0 <= index < spec.param_count:
        raise IndexError(f"flat index {index} out of range [0, {spec.param_count})")
    for layer in range(spec.depth):
        w0, b0, end = spec.offsets(layer)
        if index < end:
            if index < b0:
                row, col = divmod(index - w0, spec.layers[layer].fan_in)
                return (layer, "weight", row, col)
            return (layer, "bias", index - b0, 0)
    raise AssertionError("unreachable")


def iter_coordinates(spec: NetworkSpec) -> Iterator[tuple[int, str, int, int]]:
    for i in range(spec.param_count):
        yield index_coordinate(spec, i)


def init_network(spec: NetworkSpec, seed: int) -> ParameterStore:
    """He initialization: weights ~ N(0, 2/fan_in), biases zero.

    Draws come from ``numpy.random.default_rng(seed)`` (PCG64), layer by layer
    in flat order, so a (spec, seed) pair always yields the same store.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec.layers:
        weights.append(rng.normal(0.0, np.sqrt(2.0 / layer.fan_in), size=layer.weight_shape))
        biases.append(np.zeros(layer.units))
    return ParameterStore.from_layers(spec, weights, biases, tag="initial")


def _graph(spec: NetworkSpec, tensors: Sequence[tuple[ag.Tensor, ag.Tensor]], x: ag.Tensor) -> ag.Tensor:
    batched = x.data.ndim == len(spec.input_shape) + 1
    if x.shape[batched:] != spec.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match network input {spec.input_shape}")
    h = x
    last = spec.depth - 1
    for i, (layer, (w, b)) in enumerate(zip(spec.layers, tensors)):
        if isinstance(layer, Dense):
            if h.data.ndim != (2 if batched else 1):
                h = ag.flatten(h, batched)
            h = ag.affine_transform(w, b, h)
        else:
            h = ag.conv2d(w, h, b)
        if i != last:
            h = ag.relu(h)
    return h


def forward(spec: NetworkSpec, params: ParameterStore, x) -> np.ndarray:
    """Logits for one input or a leading-axis batch of inputs."""
    tensors = [(ag.Tensor(params.weight(i)), ag.Tensor(params.bias(i))) for i in range(spec.depth)]
    return _graph(spec, tensors, ag.Tensor(x)).data


def pre_activations(spec: NetworkSpec, params: ParameterStore, x) -> list[np.ndarray]:
    """Pre-ReLU values of every hidden layer, in order."""
    tensors = [(ag.Tensor(params.weight(i)), ag.Tensor(params.bias(i))) for i in range(spec.depth)]
    x = ag.Tensor(x)
    batched = x.data.ndim == len(spec.input_shape) + 1
    outs = []
    h = x
    for layer, (w, b) in zip(spec.layers[:-1], tensors):
        if isinstance(layer, Dense):
            if h.data.ndim != (2 if batched else 1):
                h = ag.flatten(h, batched)
            z = ag.affine_transform(w, b, h)
        else:
            z = ag.conv2d(w, h, b)
        outs.append(z.data)
        h = ag.relu(z)
    return outs


def hidden_activations(spec: NetworkSpec, params: ParameterStore, x) -> list[np.ndarray]:
    """Post-ReLU outputs of every hidden layer, in order."""
    return [np.maximum(z, 0.0) for z in pre_activations(spec, params, x)]


def loss_and_gradient(spec: NetworkSpec, params: ParameterStore, x, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient in flat order."""
    tensors = [
        (ag.Tensor(params.weight(i).copy(), requires_grad=True), ag.Tensor(params.bias(i).copy(), requires_grad=True))
        for i in range(spec.depth)
    ]
    with ag.Tape() as tape:
        loss = ag.softmax_cross_entropy(_graph(spec, tensors, ag.Tensor(x)), labels)
    sources = [t for pair in tensors for t in pair]
    grads = tape.gradient(loss, sources)
    return float(loss.data), np.concatenate([g.ravel() for g in grads])


def loss_value(spec: NetworkSpec, params_or_flat, x, labels) -> float:
    flat = getattr(params_or_flat, "flat", params_or_flat)
    store = params_or_flat if isinstance(params_or_flat, ParameterStore) else ParameterStore(spec, flat)
    return float(ag.softmax_cross_entropy(ag.Tensor(forward(spec, store, x)), labels).data)


def model_hash(params: ParameterStore) -> str:
    """SHA-256 over the canonical spec JSON and little-endian values (tag excluded)."""
    return sha256_hex(canonical_json(params.spec.to_dict()), params.flat.astype("<f8").tobytes())


def encode_model(params: ParameterStore, extra: dict | None = None) -> bytes:
    """Serialize to the ``ADLM`` container.

    Layout: magic, uint16 version, uint32 header length, canonical JSON
    header, little-endian float64 values in flat order, then the 32-byte
    SHA-256 digest of everything before it.
    """
    header = {"spec": params.spec.to_dict(), "tag": params.tag}
    if extra:
        header.update(extra)
    head = canonical_json(header)
    body = MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(head)) + head + params.flat.astype("<f8").tobytes()
    return body + hashlib.sha256(body).digest()


def decode_model(payload: bytes) -> tuple[ParameterStore, dict]:
    """Inverse of :func:`encode_model`; returns the store and the full header."""
    if len(payload) < 10 + 32:
        raise ParseError(f"model file too short ({len(payload)} bytes)")
    if payload[:4] != MODEL_MAGIC:
        raise ParseError(f"bad magic {payload[:4]!r} at offset 0")
    version, head_len = struct.unpack("<HI", payload[4:10])
    if version != MODEL_VERSION:
        raise ParseError(f"unsupported model version {version}")
    if hashlib.sha256(payload[:-32]).digest() != payload[-32:]:
        raise ParseError("model content hash mismatch")
    header = parse_json(payload[10:10 + head_len], "model header")
    spec = NetworkSpec.from_dict(header["spec"])
    raw = payload[10 + head_len:-32]
    if len(raw) != 8 * spec.param_count:
        raise ParseError(
            f"expected {8 * spec.param_count} value bytes at offset {10 + head_len}, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ParameterStore(spec, flat, header.get("tag", "initial")), header
