import numpy as np
import pytest

from amdvrp.params import Architecture, ModelParams


@pytest.fixture
def tiny_arch():
    return Architecture(d_h=16, n_layers=2, n_heads=2)


@pytest.fixture
def tiny_params(tiny_arch):
    return ModelParams.initialize(tiny_arch, seed=3)


def scaled_params(arch, seed, scale):
    """Initialised parameters multiplied by ``scale`` (sharper attention/logits)."""
    p = ModelParams.initialize(arch, seed)
    return ModelParams(arch, {k: v * scale for k, v in p.items()})


def central_diff(f, x, h=1e-5):
    """Numerical Jacobian-vector style gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
