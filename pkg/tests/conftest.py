import numpy as np
import pytest
from hypothesis import settings

from synflow.autodiff import forward, loss_and_grad
from synflow.netgraph import NetworkSpec, ParamSet, dense

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

FD_STEP = 1e-5
FD_RTOL = 1e-6
FD_FLOOR = 1e-4  # relative error is measured against max(|analytic|, |numeric|, FD_FLOOR)


def linear_net(weights: list, bias: bool = False) -> ParamSet:
    """Bias-free linear chain with the given weight matrices (no activations)."""
    weights = [np.asarray(w, dtype=float) for w in weights]
    spec = NetworkSpec((weights[0].shape[1],), [dense(w.shape[0], bias) for w in weights])
    tensors = {}
    for i, w in enumerate(weights):
        tensors[i] = {"weight": w.copy()}
        if bias:
            tensors[i]["bias"] = np.zeros(w.shape[0])
    return ParamSet(spec, tensors)


def fd_gradient(loss_fn, params: ParamSet, step: float = FD_STEP) -> dict:
    """Central finite differences of ``loss_fn(params)`` for every trainable entry."""
    out = {}
    for i, name, arr in params.items():
        if name.startswith("running"):
            continue
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_fn(params)
            arr[idx] = orig - step
            down = loss_fn(params)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out[(i, name)] = g
    return out


def fd_max_relative_error(analytic, numeric) -> float:
    worst = 0.0
    for key, num in numeric.items():
        ana = analytic.grads[key[0]][key[1]]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), FD_FLOOR)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst


def check_gradients(params: ParamSet, batch, loss: str = "cross-entropy", mode: str = "eval") -> float:
    _, grads = loss_and_grad(params, None, batch, loss, mode)
    numeric = fd_gradient(lambda p: loss_and_grad(p, None, batch, loss, mode)[0], params)
    return fd_max_relative_error(grads, numeric)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion; lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def _record(number: int, title: str, passed: bool, detail: str) -> bool:
        lines.append((number, f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def run_forward(params, x, mode="eval"):
    return forward(params, None, np.asarray(x, dtype=float), mode).output
