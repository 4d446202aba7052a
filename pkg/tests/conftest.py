import numpy as np
import pytest

from adaloc.autograd import finite_difference_oracle
from adaloc.network import Conv, Dense, NetworkSpec, init_network, loss_and_gradient, loss_value


def relative_error(a, b) -> float:
    """max |a - b| divided by the larger of the two max-norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max())
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


def random_mlp(rng: np.random.Generator):
    depth = int(rng.integers(1, 4))
    widths = [int(rng.integers(2, 33)) for _ in range(depth + 1)]
    spec = NetworkSpec.mlp(widths[0], widths[1:-1], widths[-1])
    params = init_network(spec, int(rng.integers(2**31)))
    # nonzero biases so every bias gradient is exercised
    params = params.with_flat(params.flat + rng.normal(0.0, 0.05, params.d))
    return spec, params


def random_cnn(rng: np.random.Generator):
    c_in = int(rng.integers(1, 3))
    size = int(rng.integers(5, 8))
    c1 = int(rng.integers(1, 4))
    k1 = int(rng.integers(2, 4))
    k2 = 2
    c2 = int(rng.integers(1, 3))
    h2 = size - k1 + 1 - k2 + 1
    classes = int(rng.integers(2, 5))
    spec = NetworkSpec((c_in, size, size), classes,
                       (Conv(c_in, c1, k1), Conv(c1, c2, k2), Dense(c2 * h2 * h2, classes)))
    params = init_network(spec, int(rng.integers(2**31)))
    params = params.with_flat(params.flat + rng.normal(0.0, 0.05, params.d))
    return spec, params


def gradient_vs_fd(spec, params, x, y, h=1e-4) -> float:
    _, grad = loss_and_gradient(spec, params, x, y)
    fd = finite_difference_oracle(lambda flat: loss_value(spec, flat, x, y), params, h)
    return relative_error(grad, fd)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[f"{number:02d}"] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
