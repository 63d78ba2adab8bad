import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gearlab.tensor import Tensor, backward

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar f(*arrays) with respect to every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def analytic_grad(build, arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(*leaves))
    return [l.grad for l in leaves]


def max_rel_err(a, n, floor=1e-8):
    a, n = np.asarray(a), np.asarray(n)
    mask = (np.abs(a) >= floor) | (np.abs(n) >= floor)
    if not mask.any():
        return 0.0
    return float((np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-12))[mask].max() * 2)


def gradcheck(build, arrays, h=1e-5):
    """Max relative error between taped and finite-difference gradients."""
    ana = analytic_grad(build, [a.copy() for a in arrays])
    num = numeric_grad(lambda *xs: build(*[Tensor(x) for x in xs]).item(), [a.copy() for a in arrays], h)
    return max(max_rel_err(a, n) for a, n in zip(ana, num))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_shapes():
    from gearlab.data import gen_shapes
    return gen_shapes(3, n_train=96, n_test=48, classes=3, size=8)


# -- acceptance reporting ---------------------------------------------------------
_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, passed, detail)."""
    def record(number, passed, detail=""):
        _CRITERIA[number] = (bool(passed), detail)
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
