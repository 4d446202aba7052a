"""Datasets (synthetic blobs, IDX, CSV, bundled MNIST) and accuracy evaluation."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, ParseError
from .network import NetworkSpec, ParameterStore, forward

IDX_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    """Inputs ``X`` (leading sample axis), integer labels ``y`` and provenance."""

    X: np.ndarray
    y: np.ndarray
    class_count: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] == 0:
            raise ContractError("dataset is empty")
        if self.y.shape != (self.X.shape[0],):
            raise DimensionError(f"{self.X.shape[0]} samples but labels of shape {self.y.shape}")
        if np.any(self.y < 0) or np.any(self.y >= self.class_count):
            raise ContractError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.X.shape[1:]

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.X[idx], self.y[idx], self.class_count, split or self.split, dict(self.provenance))

    def max_norm(self) -> float:
        return float(np.linalg.norm(self.X.reshape(len(self), -1), axis=1).max())


@dataclass
class EvalReport:
    """Accuracy, the error-rate metric ``1 - accuracy`` and per-class accuracy."""

    accuracy: float
    metric_M: float
    per_class: dict[int, float | None]
    count: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "metric_M": self.metric_M,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "count": self.count,
        }


def gen_blobs(
    class_count: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    sample_seed: int | None = None,
    max_norm: float | None = None,
    split: str = "train",
) -> Dataset:
    """Isotropic Gaussian clusters around random unit-sphere centres.

    ``seed`` fixes the centres, so splits of one task share a seed and
    differ in ``sample_seed``.  With ``max_norm`` set, points outside the
    ball of that radius are projected radially onto it.
    """
    if class_count < 2:
        raise ContractError("need at least two classes")
    means = np.random.default_rng(seed).normal(size=(class_count, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    rng = np.random.default_rng(seed if sample_seed is None else sample_seed)
    noise = rng.normal(size=(class_count, per_class, dim)) * spread
    X = (means[:, None, :] + noise).reshape(-1, dim)
    y = np.repeat(np.arange(class_count), per_class)
    if max_norm is not None:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X * np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
        # rounding can leave a projected point an ulp outside the ball
        over = np.linalg.norm(X, axis=1) > max_norm
        while over.any():
            X[over] *= 1.0 - 2.0 ** -52
            over = np.linalg.norm(X, axis=1) > max_norm
    provenance = {"kind": "blobs", "class_count": class_count, "dim": dim, "per_class": per_class,
                  "spread": spread, "seed": seed, "sample_seed": sample_seed, "max_norm": max_norm}
    return Dataset(X, y, class_count, split, provenance)


def blob_centres(class_count: int, dim: int, seed: int) -> np.ndarray:
    means = np.random.default_rng(seed).normal(size=(class_count, dim))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def _open_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        raw = Path(source).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"corrupt gzip stream: {exc}") from exc
    return raw


def read_idx(source) -> np.ndarray:
    """Decode an IDX array from a path or raw bytes (gzip is detected)."""
    raw = _open_bytes(source)
    if len(raw) < 4:
        raise ParseError(f"truncated IDX header: need 4 bytes at offset 0, have {len(raw)}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise ParseError(f"bad IDX magic {raw[:4].hex()} at offset 0")
    dtype = IDX_DTYPES[raw[2]]
    ndim = raw[3]
    head_end = 4 + 4 * ndim
    if len(raw) < head_end:
        raise ParseError(
            f"truncated IDX dimensions at offset 4: missing {head_end - len(raw)} bytes"
        )
    shape = struct.unpack(f">{ndim}I", raw[4:head_end])
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    have = len(raw) - head_end
    if have < need:
        raise ParseError(f"truncated IDX data at offset {head_end}: missing {need - have} bytes")
    if have > need:
        raise ParseError(f"{have - need} trailing bytes after IDX data at offset {head_end + need}")
    return np.frombuffer(raw, dtype=dtype, offset=head_end).reshape(shape).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray, dtype: str = "u1") -> Path:
    """Encode ``array`` as IDX with the given element type (gzip if the name ends in .gz)."""
    dt = np.dtype(dtype)
    code = None
    for c, candidate in IDX_DTYPES.items():
        if candidate.kind == dt.kind and candidate.itemsize == dt.itemsize:
            code = c
    if code is None:
        raise ContractError(f"dtype {dt} has no IDX encoding")
    arr = np.asarray(array)
    payload = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload += arr.astype(IDX_DTYPES[code]).tobytes()
    target = Path(path)
    if target.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(payload)
    return target


def load_idx(images, labels, class_count: int | None = None, split: str = "test",
             flatten: bool = True) -> Dataset:
    """Read an IDX image/label pair; unsigned-byte pixels are scaled to [0, 1]."""
    raw = read_idx(images)
    y = read_idx(labels).astype(np.int64)
    if y.ndim != 1 or y.shape[0] != raw.shape[0]:
        raise ParseError(f"{raw.shape[0]} images but labels of shape {y.shape}")
    X = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        X /= 255.0
    if flatten:
        X = X.reshape(X.shape[0], -1)
    k = class_count if class_count is not None else int(y.max()) + 1
    prov = {"kind": "idx", "images": str(images) if not isinstance(images, bytes) else "<bytes>",
            "labels": str(labels) if not isinstance(labels, bytes) else "<bytes>"}
    return Dataset(X, y, k, split, prov)


def load_csv(path, class_count: int | None = None, split: str = "train") -> Dataset:
    """CSV with a header row; the ``label`` column holds class indices, all others are features."""
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        raise ParseError(f"{path}: empty CSV")
    header = rows[0]
    if "label" not in header:
        raise ParseError(f"{path}: no 'label' column in header")
    li = header.index("label")
    try:
        table = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric field: {exc}") from exc
    if table.ndim != 2 or table.shape[1] != len(header):
        raise ParseError(f"{path}: rows do not match header width {len(header)}")
    y = table[:, li].astype(np.int64)
    X = np.delete(table, li, axis=1)
    k = class_count if class_count is not None else int(y.max()) + 1
    return Dataset(X, y, k, split, {"kind": "csv", "path": str(path)})


def predict(spec: NetworkSpec, params: ParameterStore, X: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Argmax class per sample; numpy's argmax resolves ties to the lowest index."""
    out = [np.argmax(forward(spec, params, X[i:i + batch]), axis=1) for i in range(0, X.shape[0], batch)]
    return np.concatenate(out)


def evaluate(spec: NetworkSpec, params: ParameterStore, dataset: Dataset) -> EvalReport:
    if dataset.input_shape != spec.input_shape:
        raise DimensionError(f"dataset inputs {dataset.input_shape} do not match network {spec.input_shape}")
    if dataset.class_count != spec.class_count:
        raise DimensionError(f"dataset has {dataset.class_count} classes, network {spec.class_count}")
    hit = predict(spec, params, dataset.X) == dataset.y
    accuracy = float(np.count_nonzero(hit)) / len(dataset)
    per_class: dict[int, float | None] = {}
    for c in range(dataset.class_count):
        sel = dataset.y == c
        n = int(np.count_nonzero(sel))
        per_class[c] = float(np.count_nonzero(hit[sel])) / n if n else None
    return EvalReport(accuracy, 1.0 - accuracy, per_class, len(dataset))


def bundled_mnist_path() -> Path:
    """Location of the 5000-sample MNIST extract shipped with mlxtend."""
    try:
        from importlib.resources import files

        path = Path(str(files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"))
    except ModuleNotFoundError as exc:
        raise ContractError("bundled MNIST requires the optional 'mlxtend' package") from exc
    if not path.exists():
        raise ContractError(f"bundled MNIST file not found at {path}")
    return path


def load_bundled_mnist() -> tuple[np.ndarray, np.ndarray]:
    """Raw pixels (uint8, 5000 x 784) and labels of the bundled extract."""
    table = np.loadtxt(bundled_mnist_path(), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8), table[:, -1].astype(np.int64)


def mnist_splits(source: int = 2000, train: int = 2000, test: int = 1000, seed: int = 0) -> dict[str, Dataset]:
    """Disjoint stratified source/train/test subsets of the bundled MNIST extract.

    Sizes must be multiples of ten; every split is class balanced.
    """
    pixels, labels = load_bundled_mnist()
    sizes = {"source": source, "train": train, "test": test}
    if any(n % 10 for n in sizes.values()):
        raise ContractError("split sizes must be multiples of 10")
    per = {k: n // 10 for k, n in sizes.items()}
    rng = np.random.default_rng(seed)
    picks: dict[str, list[np.ndarray]] = {k: [] for k in sizes}
    for c in range(10):
        members = rng.permutation(np.flatnonzero(labels == c))
        if sum(per.values()) > members.size:
            raise ContractError(f"class {c} has only {members.size} samples")
        start = 0
        for k in sizes:
            picks[k].append(members[start:start + per[k]])
            start += per[k]
    out = {}
    for k in sizes:
        idx = np.concatenate(picks[k])
        prov = {"kind": "bundled-mnist", "part": k, "seed": seed, "sizes": sizes}
        out[k] = Dataset(pixels[idx] / 255.0, labels[idx], 10, "test" if k == "test" else "train", prov)
    return out


def export_mnist_idx(directory, **split_kwargs) -> dict[str, tuple[Path, Path]]:
    """Write each bundled-MNIST split as an IDX image/label pair."""
    directory = Path(directory)
    written = {}
    for name, ds in mnist_splits(**split_kwargs).items():
        img = write_idx(directory / f"{name}-images-idx3-ubyte",
                        np.rint(ds.X * 255.0).astype(np.uint8).reshape(-1, 28, 28))
        lab = write_idx(directory / f"{name}-labels-idx1-ubyte", ds.y.astype(np.uint8))
        written[name] = (img, lab)
    return written
