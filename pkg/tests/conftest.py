import numpy as np
import pytest

from nipslab import tensor as T


def numeric_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; complex ``x`` perturbs both parts."""
    x = np.array(x, copy=True)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    directions = (1.0, 1j) if np.iscomplexobj(x) else (1.0,)
    for i in range(flat.size):
        for unit in directions:
            orig = flat[i]
            flat[i] = orig + step * unit
            up = f(x)
            flat[i] = orig - step * unit
            down = f(x)
            flat[i] = orig
            gflat[i] += unit * (up - down) / (2 * step)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def autograd(build, *arrays):
    """Gradients of ``build(*tensors)`` (a scalar) with respect to every input."""
    leaves = [T.tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = build(*leaves)
    grads = tape.backward(loss)
    return [grads.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]


def check_gradients(build, *arrays, step=1e-6):
    """Largest relative error between autodiff and finite differences over inputs."""
    analytic = autograd(build, *arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(xk, k=k):
            args = [T.tensor(x) for x in arrays]
            args[k] = T.tensor(xk)
            return build(*args).data.item()
        worst = max(worst, rel_err(analytic[k], numeric_grad(f, a, step)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
