import numpy as np
import pytest

from revprop.ops import ConvKernel

ACCEPTANCE_LINES = []


def rel_err(a, b) -> float:
    """Max-norm relative difference ``max|a-b| / max|b|`` (absolute if ``b`` is zero)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.max(np.abs(b)) if b.size else 0.0
    diff = np.max(np.abs(a - b)) if a.size else 0.0
    return float(diff / scale) if scale > 0 else float(diff)


def conv_oracle(x, w, b, padding=0):
    """Direct nested-loop 3-D cross-correlation."""
    c_in, X, Y, Z = x.shape
    c_out, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    ox, oy, oz = (s - k + 1 + 2 * padding for s in (X, Y, Z))
    out = np.zeros((c_out, ox, oy, oz))
    for o in range(c_out):
        for i in range(ox):
            for j in range(oy):
                for l in range(oz):
                    acc = b[o]
                    for c in range(c_in):
                        acc += np.sum(w[o, c] * xp[c, i:i + k, j:j + k, l:l + k])
                    out[o, i, j, l] = acc
    return out


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def random_kernel(rng, c_out, c_in, k, padding=0, dtype=np.float64):
    return ConvKernel.from_arrays(
        rng.standard_normal((c_out, c_in, k, k, k)).astype(dtype) * 0.3,
        rng.standard_normal(c_out).astype(dtype) * 0.1,
        padding,
    )


def with_random_biases(params, seed, scale=0.1):
    """Copy of ``params`` with N(0, scale^2) biases.

    Zero biases put many pre-activations exactly on the ReLU kink (ReLU outputs
    are exact zeros), where gradients are not continuous in the input.
    """
    rng = np.random.default_rng(seed)
    updates = {}
    for path, k in params.items():
        b = rng.standard_normal(k.bias.shape).astype(k.bias.dtype) * scale
        updates[path] = ConvKernel.from_arrays(k.weights.numpy(), b, k.padding)
    return params.replace(updates)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
