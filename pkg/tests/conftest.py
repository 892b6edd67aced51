"""Shared fixtures and a central finite-difference gradient checker."""
import numpy as np
import pytest

from faslseg.tensor import Tensor

FD_STEP = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error.

    Gradients that vanish identically (a conv bias feeding a training-mode
    batch norm, for example) leave only roundoff on both sides, so the
    denominator is floored at 1e-4, far below any real gradient norm here.
    """
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-4)
    return float(num / den)


def numeric_grad(f, arr: np.ndarray, step: float = FD_STEP, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def check_grads(fn, *inputs: np.ndarray, seed: int = 0, tol: float = 1e-4) -> list[float]:
    """Compare autodiff and finite differences for ``sum(w * fn(*inputs))``.

    ``w`` is a fixed random weighting so that every output element contributes
    with a different sign and size. Returns the relative error per input.
    """
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors)
    w = np.random.default_rng(seed).standard_normal(out.shape)
    (out * Tensor(w)).sum().backward()

    def scalar():
        return float((fn(*[Tensor(x) for x in inputs]).data * w).sum())

    errors = []
    for t, x in zip(tensors, inputs):
        errors.append(rel_error(t.grad, numeric_grad(scalar, x)))
    assert max(errors) < tol, errors
    return errors


def check_module_grads(module, x: np.ndarray, seed: int = 0, tol: float = 1e-4, max_entries: int = 40) -> None:
    """Finite-difference check of a module's input and parameter gradients."""
    rng = np.random.default_rng(seed)
    xt = Tensor(x, requires_grad=True)
    out = module(xt)
    w = rng.standard_normal(out.shape)
    module.zero_grad()
    (out * Tensor(w)).sum().backward()

    def scalar():
        return float((module(Tensor(x)).data * w).sum())

    targets = [("input", x, xt.grad)] + [(n, p.data, p.grad) for n, p in module.named_parameters()]
    for name, arr, grad in targets:
        idx = rng.choice(arr.size, size=min(max_entries, arr.size), replace=False)
        num = numeric_grad(scalar, arr, indices=idx)
        err = rel_error(grad.reshape(-1)[idx], num.reshape(-1)[idx])
        assert err < tol, f"{name}: relative error {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria record one line each here; the lines are repeated in the
# terminal summary so they are visible without ``-s``.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
