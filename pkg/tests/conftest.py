import numpy as np
import pytest

from sefcn.cli import main as cli_main


def numeric_grad(f, x, h=1e-6):
    """Central differences of the scalar function ``f`` w.r.t. every entry of ``x``."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def check_layer_grads(layer, x, mode="train", seed=0, tol=1e-6):
    """FD-check input and parameter gradients of a float64 layer on L = sum(w * y)."""
    rng = np.random.default_rng(seed)
    y = layer.forward(x, mode)
    w = rng.standard_normal(y.shape)
    layer.zero_grad()
    dx = layer.backward(w)

    def loss():
        return float((layer.forward(x, mode) * w).sum())

    assert rel_err(dx, numeric_grad(loss, x)) < tol
    for name, p in layer.named_parameters():
        assert rel_err(p.grad, numeric_grad(loss, p.value)) < tol, name


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_cli(capsys):
    def run(*argv):
        code = cli_main([str(a) for a in argv])
        out = capsys.readouterr()
        return code, out.out, out.err
    return run


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""
    def emit(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok
    return emit
