"""Full and key-only fine-tuning with mini-batch SGD, plus training instrumentation."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.stats import spearmanr

from . import autograd as ag
from .data import Dataset, predict
from .errors import ContractError, DimensionError, NumericError
from .keying import Key
from .network import NetworkSpec, ParameterStore, forward, loss_and_gradient

TRAIN_STRATEGIES = ("full", "key-top", "key-pool", "key-random", "key-bottom")
StepHook = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch SGD settings.

    ``momentum`` and ``weight_decay`` default to zero, which gives the plain
    SGD update.  Weight decay acts on weights only, never on biases.
    """

    eta: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    strategy: str = "full"
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ContractError("eta must be positive")
        if self.epochs < 0:
            raise ContractError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.strategy not in TRAIN_STRATEGIES:
            raise ContractError(f"unknown training strategy {self.strategy!r}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ContractError("momentum must lie in [0, 1) and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class UpdateMask:
    """Sorted flat indices that SGD is allowed to modify."""

    allowed: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.allowed, dtype=np.int64))
        idx.setflags(write=False)
        object.__setattr__(self, "allowed", idx)

    @classmethod
    def full(cls, d: int) -> "UpdateMask":
        return cls(np.arange(d))

    @classmethod
    def from_key(cls, key: Key) -> "UpdateMask":
        return cls(key.indices)

    def validate(self, d: int) -> None:
        if self.allowed.size and (self.allowed[0] < 0 or self.allowed[-1] >= d):
            raise ContractError(f"mask index outside [0, {d})")

    def __len__(self) -> int:
        return self.allowed.size


def weight_indicator(spec: NetworkSpec) -> np.ndarray:
    """Boolean vector marking weight (not bias) coordinates."""
    out = np.zeros(spec.param_count, dtype=bool)
    for layer in range(spec.depth):
        w0, b0, _ = spec.offsets(layer)
        out[w0:b0] = True
    return out


def _gradient_checked(params: ParameterStore, X, y) -> np.ndarray:
    _, grad = loss_and_gradient(params.spec, params, X, y)
    bad = ~np.isfinite(grad)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite gradient in {int(bad.sum())} coordinates (first flat index {first})")
    return grad


def masked_sgd_step(params: ParameterStore, batch: tuple[np.ndarray, np.ndarray], mask: UpdateMask,
                    eta: float) -> ParameterStore:
    """One SGD step on the mean batch gradient, applied only inside ``mask``.

    Coordinates outside the mask are copied, so they stay bit-identical.
    """
    X, y = batch
    if len(y) == 0:
        raise ContractError("batch is empty")
    mask.validate(params.d)
    flat = params.flat.copy()
    if len(mask):
        grad = _gradient_checked(params, X, y)
        flat[mask.allowed] -= eta * grad[mask.allowed]
    return params.with_flat(flat)


def dataset_loss(spec: NetworkSpec, params: ParameterStore, dataset: Dataset, batch: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(dataset), batch):
        logits = forward(spec, params, dataset.X[i:i + batch])
        part = ag.softmax_cross_entropy(ag.Tensor(logits), dataset.y[i:i + batch])
        total += float(part.data) * logits.shape[0]
    return total / len(dataset)


def _metrics(epoch: int, params: ParameterStore, splits: Iterable[tuple[str, Dataset]]) -> list[dict]:
    rows = []
    for name, ds in splits:
        acc = float(np.mean(predict(params.spec, params, ds.X) == ds.y))
        rows.append({"epoch": epoch, "split": name, "loss": dataset_loss(params.spec, params, ds), "accuracy": acc})
    return rows


def finetune(
    params: ParameterStore,
    dataset: Dataset,
    config: TrainConfig,
    key: Key | None = None,
    eval_set: Dataset | None = None,
    on_step: StepHook | None = None,
    tag: str | None = None,
    record: bool = True,
) -> tuple[ParameterStore, list[dict]]:
    """Shuffled mini-batch SGD; key strategies update only the key's coordinates.

    Returns the trained store and one metrics row per (epoch, split), epoch 0
    being the starting point.  Shuffling uses ``default_rng(config.seed)``.
    """
    if (key is None) != (config.strategy == "full"):
        raise ContractError("a key is required exactly when the strategy is not 'full'")
    spec = params.spec
    if dataset.input_shape != spec.input_shape or dataset.class_count != spec.class_count:
        raise DimensionError("dataset does not match the network")
    mask = UpdateMask.full(params.d) if key is None else UpdateMask.from_key(key)
    idx = mask.allowed
    decay = np.where(weight_indicator(spec)[idx], config.weight_decay, 0.0) if config.weight_decay else None
    velocity = np.zeros(idx.size) if config.momentum else None
    out_tag = tag or ("full-finetuned" if key is None else "key-finetuned")
    splits = [("train", dataset)] + ([("test", eval_set)] if eval_set is not None else [])
    rows = _metrics(0, params, splits) if record else []
    rng = np.random.default_rng(config.seed)
    flat = params.flat.copy()
    step = 0
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            current = ParameterStore(spec, flat, out_tag)
            grad = _gradient_checked(current, dataset.X[sel], dataset.y[sel])[idx]
            if decay is not None:
                grad = grad + decay * flat[idx]
            if velocity is not None:
                velocity = config.momentum * velocity + grad
                grad = velocity
            new_flat = flat.copy()
            new_flat[idx] -= config.eta * grad
            if on_step is not None:
                on_step(step, flat, new_flat)
            flat = new_flat
            step += 1
        if record:
            rows.extend(_metrics(epoch, ParameterStore(spec, flat), splits))
    return ParameterStore(spec, flat, out_tag if config.epochs else params.tag), rows


def param_distance(a: ParameterStore, b: ParameterStore, exclude=()) -> float:
    """Euclidean distance over coordinates not listed in ``exclude``."""
    if a.spec != b.spec:
        raise DimensionError("parameter stores belong to different networks")
    keep = np.ones(a.d, dtype=bool)
    ex = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    keep[ex] = False
    diff = a.flat[keep] - b.flat[keep]
    return float(np.sqrt(np.dot(diff, diff)))


def in_practical_set(theta_tilde: ParameterStore, theta_hat: ParameterStore, epsilon: float) -> tuple[float, bool]:
    """Distance to the fully fine-tuned parameters and whether it is within ``epsilon``."""
    dist = param_distance(theta_tilde, theta_hat)
    return dist, dist <= epsilon


def spearman_or_none(a: np.ndarray, b: np.ndarray) -> float | None:
    """Spearman rank correlation, or None when either side is constant."""
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    rho = spearmanr(a, b).statistic
    return None if not np.isfinite(rho) else float(rho)


@dataclass
class LayerProfile:
    layer: int
    norms: np.ndarray
    accumulated: np.ndarray
    spearman: float | None

    def to_dict(self) -> dict:
        return {"layer": self.layer, "norms": self.norms.tolist(), "accumulated": self.accumulated.tolist(),
                "spearman": self.spearman}


def grad_accumulation_profile(
    params: ParameterStore, dataset: Dataset, config: TrainConfig, eval_set: Dataset | None = None,
) -> tuple[list[LayerProfile], ParameterStore, list[dict]]:
    """Fine-tune all parameters while summing |update| on each hidden unit's incoming weights.

    Returns one profile per hidden layer pairing the initial l1 norm of each
    unit with its accumulated update magnitude, plus the trained store and
    its metrics rows.
    """
    if config.epochs < 1:
        raise ContractError("profiling needs at least one epoch")
    if config.strategy != "full":
        raise ContractError("profiling runs full fine-tuning")
    spec = params.spec
    hidden = range(spec.depth - 1)
    acc = {layer: np.zeros(spec.layers[layer].units) for layer in hidden}

    def hook(_step, old, new):
        delta = np.abs(new - old)
        for layer in hidden:
            w0, b0, _ = spec.offsets(layer)
            acc[layer] += delta[w0:b0].reshape(spec.layers[layer].units, -1).sum(axis=1)

    trained, rows = finetune(params, dataset, config, eval_set=eval_set, on_step=hook)
    profiles = []
    for layer in hidden:
        norms = np.abs(params.weight(layer)).reshape(spec.layers[layer].units, -1).sum(axis=1)
        profiles.append(LayerProfile(layer, norms, acc[layer], spearman_or_none(norms, acc[layer])))
    return profiles, trained, rows


CURVE_FIELDS = ("strategy", "seed", "epoch", "split", "loss", "accuracy")


def curves_csv(rows: Iterable[dict]) -> bytes:
    """Metrics rows as CSV text; columns absent from a row are left blank."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CURVE_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue().encode("utf-8")
