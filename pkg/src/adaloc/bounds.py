"""Numerical checks for the output-variance bound, distance thresholds and gradient ordering.

Output variance
    For a network with Lipschitz activation (constant ``B``), zero-mean
    independent weights of variance ``var_w[m]`` and biases of variance
    ``var_b[m]``, the summed output variance is at most

        ||x||^2 prod_m(B^2 n_m var_w[m])
          + B^2 n_L var_b[L]
          + B^2 sum_{i<L} n_i var_b[i] prod_{j>i}(B^2 n_j var_w[j])

    where ``n_m`` is the output width of layer ``m``.  With every width equal
    to ``N`` this is the familiar common-width form.

Distance threshold
    ``eps / (B_sigma^(L-1) B_theta^L B_x) - B_sigma B_theta``, holding with
    probability ``(1 - 2 exp(-t^2))^L`` for the distance form and
    ``(1 - 2 exp(-t^2))^(L+1)`` for the standard-deviation form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adaptation import param_distance, spearman_or_none
from .data import Dataset
from .errors import ContractError, DimensionError
from .network import NetworkSpec, ParameterStore, hidden_activations, init_network, loss_and_gradient


@dataclass(frozen=True)
class VarianceProfile:
    """Per-layer weight/bias variances, output widths and activation Lipschitz constant."""

    var_w: tuple[float, ...]
    var_b: tuple[float, ...]
    widths: tuple[int, ...]
    lipschitz: float = 1.0

    def __post_init__(self):
        for name in ("var_w", "var_b", "widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (len(self.var_w) == len(self.var_b) == len(self.widths)) or not self.widths:
            raise DimensionError("profile needs one variance pair and width per layer")
        if min(self.var_w) < 0 or min(self.var_b) < 0:
            raise ContractError("variances must be non-negative")
        if min(self.widths) < 1:
            raise ContractError("widths must be at least 1")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @classmethod
    def uniform(cls, depth: int, width: int, var_w: float, var_b: float, lipschitz: float = 1.0) -> "VarianceProfile":
        return cls((var_w,) * depth, (var_b,) * depth, (width,) * depth, lipschitz)

    @classmethod
    def from_params(cls, params: ParameterStore) -> "VarianceProfile":
        """Second moments (about zero) of each layer's weights and biases."""
        spec = params.spec
        var_w = tuple(float(np.mean(params.weight(i) ** 2)) for i in range(spec.depth))
        var_b = tuple(float(np.mean(params.bias(i) ** 2)) for i in range(spec.depth))
        widths = tuple(int(np.prod(spec.activation_shape(i))) for i in range(spec.depth))
        return cls(var_w, var_b, widths)


def variance_bound(profile: VarianceProfile, x_norm: float) -> float:
    """Three-term ceiling on the summed output variance."""
    gain = [profile.lipschitz ** 2 * n * vw for n, vw in zip(profile.widths, profile.var_w)]
    L = profile.depth
    signal = x_norm ** 2 * math.prod(gain)
    last_bias = profile.lipschitz ** 2 * profile.widths[-1] * profile.var_b[-1]
    inner = sum(
        profile.lipschitz ** 2 * profile.widths[i] * profile.var_b[i] * math.prod(gain[i + 1:])
        for i in range(L - 1)
    )
    return signal + last_bias + inner


def variance_recursion(profile: VarianceProfile, x_norm: float) -> float:
    """Layer-by-layer form of the same ceiling: V_m = B^2 n_m (var_w V_{m-1} + var_b)."""
    v = x_norm ** 2
    for n, vw, vb in zip(profile.widths, profile.var_w, profile.var_b):
        v = profile.lipschitz ** 2 * n * (vw * v + vb)
    return v


def _draw(rng: np.random.Generator, var: float, shape, law: str) -> np.ndarray:
    if law == "gaussian":
        return rng.normal(0.0, math.sqrt(var), size=shape)
    if law == "uniform":
        half = math.sqrt(3.0 * var)
        return rng.uniform(-half, half, size=shape)
    raise ContractError(f"unknown weight law {law!r}")


def mc_output_variance(
    profile: VarianceProfile,
    x,
    trials: int = 10_000,
    seed: int = 0,
    activation: str = "relu",
    law: str = "gaussian",
    return_stderr: bool = False,
):
    """Monte-Carlo summed output variance of random networks at a fixed input.

    Each trial draws a fresh network with independent zero-mean weights and
    biases of the profile's variances, applies ``activation`` after every
    layer but the last, and records the output.  The estimate is the sum of
    per-coordinate sample variances; with ``return_stderr`` the standard
    error of that estimate is returned too.
    """
    if trials < 100:
        raise ContractError("need at least 100 trials")
    if activation not in ("relu", "identity"):
        raise ContractError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64).ravel()
    h = np.broadcast_to(x, (trials, x.size))
    for m, (n, vw, vb) in enumerate(zip(profile.widths, profile.var_w, profile.var_b)):
        w = _draw(rng, vw, (trials, n, h.shape[1]), law)
        b = _draw(rng, vb, (trials, n), law)
        h = np.einsum("tij,tj->ti", w, h) + b
        if activation == "relu" and m < profile.depth - 1:
            h = np.maximum(h, 0.0)
    centred = h - h.mean(axis=0)
    per_trial = np.sum(centred ** 2, axis=1) * trials / (trials - 1)
    estimate = float(np.mean(per_trial))
    if return_stderr:
        return estimate, float(np.std(per_trial, ddof=1) / math.sqrt(trials))
    return estimate


@dataclass
class BoundConstants:
    """Constants entering the distance threshold."""

    L: int
    B_sigma: float
    B_theta: float
    B_x: float
    K_l: list[float] = field(default_factory=list)
    C: float = 1.0
    t: float = 2.0
    epsilon: float = 1.0
    d: int | None = None

    def __post_init__(self):
        if self.L < 1 or min(self.B_sigma, self.B_theta, self.B_x, self.C, self.t, self.epsilon) <= 0:
            raise ContractError("bound constants must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Threshold:
    threshold: float
    success_probability: float
    std_success_probability: float
    vacuous: bool
    std_threshold: float | None = None


def distance_threshold(c: BoundConstants) -> Threshold:
    """Distance threshold and its success probabilities; a non-positive threshold is flagged vacuous."""
    threshold = c.epsilon / (c.B_sigma ** (c.L - 1) * c.B_theta ** c.L * c.B_x) - c.B_sigma * c.B_theta
    base = 1.0 - 2.0 * math.exp(-c.t ** 2)
    std_threshold = None
    if c.d is not None:
        std_threshold = threshold / (c.C * (math.sqrt(c.d) + c.t))
    return Threshold(threshold, base ** c.L, base ** (c.L + 1), threshold <= 0, std_threshold)


def slack_ratio(empirical_distance: float, threshold: float) -> float | None:
    """Empirical distance over threshold, or None when the threshold is vacuous."""
    return empirical_distance / threshold if threshold > 0 else None


def spectral_norm(matrix, iterations: int = 10_000, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``M^T M``.

    Arrays with more than two axes are reshaped to (rows, -1), which is the
    usual matrix view of a convolution kernel.  Stops when the Rayleigh
    quotient changes by less than ``tol`` relative, or after ``iterations``.
    """
    if iterations < 1:
        raise ContractError("need at least one iteration")
    m = np.asarray(matrix, dtype=np.float64)
    m = m.reshape(m.shape[0], -1) if m.ndim != 2 else m
    if not np.any(m):
        return 0.0
    v = np.random.default_rng(seed).normal(size=m.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_lam = float(np.dot(m @ v, m @ v))
        if abs(new_lam - lam) <= tol * new_lam:
            lam = new_lam
            break
        lam = new_lam
    return math.sqrt(lam)


def subgaussian_proxy(values) -> float:
    """Sample standard deviation divided by sqrt(ln 2); exact for centred Gaussians."""
    return float(np.std(np.asarray(values), ddof=1) / math.sqrt(math.log(2.0)))


def estimate_constants(
    spec: NetworkSpec,
    params: ParameterStore,
    dataset: Dataset,
    epsilon: float = 1.0,
    C: float = 1.0,
    t: float = 2.0,
    activation: str = "relu",
) -> BoundConstants:
    """Constants measured from a trained network and its inputs."""
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if activation != "relu":
        raise ContractError("only ReLU networks are supported")
    b_theta = max(spectral_norm(params.weight(i)) for i in range(spec.depth))
    k_l = [subgaussian_proxy(params.weight(i)) for i in range(spec.depth)]
    return BoundConstants(spec.depth, 1.0, b_theta, dataset.max_norm(), k_l, C, t, epsilon, spec.param_count)


@dataclass
class BoundReport:
    """Measured parameter distance against the threshold, with diagnostics."""

    threshold: float
    empirical_distance: float
    slack_ratio: float | None
    success_probability: float
    std_success_probability: float
    vacuous: bool
    layer_distances: list[float]
    layer_distance_sum: float
    std_difference: float
    std_threshold: float | None
    epsilon_for_unit_slack: float
    constants: dict

    def to_dict(self) -> dict:
        return asdict(self)


def slack_report(theta_tilde: ParameterStore, theta_hat: ParameterStore, constants: BoundConstants) -> BoundReport:
    if theta_tilde.spec != theta_hat.spec:
        raise DimensionError("parameter stores belong to different networks")
    spec = theta_hat.spec
    th = distance_threshold(constants)
    distance = param_distance(theta_tilde, theta_hat)
    layers = []
    for i in range(spec.depth):
        w0, _, end = spec.offsets(i)
        diff = theta_tilde.flat[w0:end] - theta_hat.flat[w0:end]
        layers.append(float(np.sqrt(np.dot(diff, diff))))
    diff = theta_tilde.flat - theta_hat.flat
    scale = constants.B_sigma ** (constants.L - 1) * constants.B_theta ** constants.L * constants.B_x
    return BoundReport(
        threshold=th.threshold,
        empirical_distance=distance,
        slack_ratio=slack_ratio(distance, th.threshold),
        success_probability=th.success_probability,
        std_success_probability=th.std_success_probability,
        vacuous=th.vacuous,
        layer_distances=layers,
        layer_distance_sum=float(sum(layers)),
        std_difference=float(np.std(diff)),
        std_threshold=th.std_threshold,
        epsilon_for_unit_slack=(distance + constants.B_sigma * constants.B_theta) * scale,
        constants=constants.to_dict(),
    )


@dataclass
class OrderingReport:
    """Pairwise agreement between predecessor-unit l1 norms and gradient magnitudes."""

    layer: int
    pairs: int
    respected: int
    fraction: float
    spearman: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _column_groups(spec: NetworkSpec, layer: int, grad_w: np.ndarray) -> np.ndarray:
    """|gradient| of layer ``layer`` grouped as (its units, predecessor units)."""
    units = spec.layers[layer].units
    prev_units = spec.layers[layer - 1].units
    return np.abs(grad_w).reshape(units, prev_units, -1).sum(axis=2)


def gradient_ordering_check(spec: NetworkSpec, params: ParameterStore, x, label: int, layer: int) -> OrderingReport:
    """Compare gradient sizes on the weights reading from layer ``layer - 1``.

    For every row ``i`` of layer ``layer`` and every ordered pair of
    predecessor units with ``norm_j <= norm_k`` (j != k), the pair respects
    the ordering when ``|g_ij| <= |g_ik|``.  Conv weights and flattened
    feature-map blocks are summed per predecessor channel.  The Spearman
    correlation is between predecessor norms and mean |gradient| per column.
    """
    if not 1 <= layer < spec.depth:
        raise ContractError("layer must have a hidden predecessor")
    prev_units = spec.layers[layer - 1].units
    if prev_units < 2:
        raise ContractError("predecessor layer needs at least two units")
    norms = np.abs(params.weight(layer - 1)).reshape(prev_units, -1).sum(axis=1)
    _, grad = loss_and_gradient(spec, params, np.asarray(x)[None], np.array([label]))
    w0, b0, _ = spec.offsets(layer)
    g = _column_groups(spec, layer, grad[w0:b0])
    j, k = np.nonzero((norms[:, None] <= norms[None, :]) & ~np.eye(prev_units, dtype=bool))
    respected = int(np.count_nonzero(g[:, j] <= g[:, k]))
    pairs = int(j.size * g.shape[0])
    return OrderingReport(layer, pairs, respected, respected / pairs if pairs else 1.0,
                          spearman_or_none(norms, g.mean(axis=0)))


def ordering_statistics(
    models: int = 100,
    input_dim: int = 16,
    hidden: Sequence[int] = (16, 16),
    class_count: int = 4,
    seed: int = 0,
    nonnegative_weights: bool = False,
) -> dict:
    """Mean ordering fraction over seeded random ReLU MLPs fed nonnegative inputs.

    Each model uses He initialization; with ``nonnegative_weights`` the
    weights are replaced by their absolute values.  Inputs are uniform on
    [0, 1) and labels uniform over the classes.
    """
    spec = NetworkSpec.mlp(input_dim, hidden, class_count)
    rng = np.random.default_rng(seed)
    per_model = []
    spearmans = []
    for m in range(models):
        params = init_network(spec, seed + m)
        if nonnegative_weights:
            params = params.with_flat(np.abs(params.flat))
        x = rng.uniform(0.0, 1.0, size=input_dim)
        label = int(rng.integers(class_count))
        reports = [gradient_ordering_check(spec, params, x, label, layer) for layer in range(1, spec.depth)]
        per_model.append(float(np.mean([r.fraction for r in reports])))
        spearmans.extend(r.spearman for r in reports if r.spearman is not None)
    return {
        "models": models,
        "nonnegative_weights": nonnegative_weights,
        "mean_fraction": float(np.mean(per_model)),
        "min_fraction": float(np.min(per_model)),
        "mean_spearman": float(np.mean(spearmans)) if spearmans else None,
    }


def activation_ordering(spec: NetworkSpec, params: ParameterStore, x, layer: int) -> float:
    """Fraction of norm-ordered unit pairs whose ReLU outputs are ordered the same way."""
    y = hidden_activations(spec, params, np.asarray(x)[None])[layer][0].reshape(spec.layers[layer].units, -1).sum(1)
    norms = np.abs(params.weight(layer)).reshape(spec.layers[layer].units, -1).sum(axis=1)
    j, k = np.nonzero((norms[:, None] <= norms[None, :]) & ~np.eye(norms.size, dtype=bool))
    return float(np.mean(y[j] <= y[k])) if j.size else 1.0

