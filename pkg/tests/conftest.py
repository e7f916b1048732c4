import numpy as np
import pytest

from aha import autodiff as ad

ACCEPTANCE_LINES: list[str] = []


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(1.0, np.abs(a).max(), np.abs(b).max()))


def fd_check(build, inputs: list[ad.Tensor], h: float = 1e-6):
    """Compare tape gradients of ``sum(build(*inputs) * w)`` against central differences.

    Returns the worst relative error across inputs.
    """
    rng = np.random.default_rng(123)
    out = build(*inputs)
    weights = rng.normal(size=out.shape)

    def loss():
        with ad.no_grad():
            return float((build(*inputs).data * weights).sum())

    for t in inputs:
        t.zero_grad()
    total = ad.tsum(ad.mul(build(*inputs), ad.Tensor(weights)))
    ad.backward(total)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numeric_grad(loss, t.data, h)
        worst = max(worst, rel_err(t.grad, num))
    return worst


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
