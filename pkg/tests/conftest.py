import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps small-op tests from fighting over the two sandbox cores
    torch.set_num_threads(2)
    yield


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom


def fd_directional_check(fn, inputs, n_directions=3, eps=1e-6, rtol=1e-4, gen=None):
    """Central finite-difference check of a scalar function's gradient.

    fn maps the tensors in `inputs` to a scalar; every input is float64.
    Compares the analytic directional derivative against (f(x+eps*v) -
    f(x-eps*v)) / (2*eps) along random directions v and returns the worst
    relative error seen.
    """
    gen = gen or torch.Generator().manual_seed(0)
    leaves = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    worst = 0.0
    for _ in range(n_directions):
        dirs = [torch.randn(t.shape, dtype=torch.float64, generator=gen) for t in leaves]
        analytic = sum(
            float((g * v).sum()) for g, v in zip(grads, dirs) if g is not None
        )
        plus = fn(*[(t + eps * v).detach() for t, v in zip(leaves, dirs)])
        minus = fn(*[(t - eps * v).detach() for t, v in zip(leaves, dirs)])
        fd = (float(plus) - float(minus)) / (2 * eps)
        worst = max(worst, rel_err(analytic, fd))
    assert worst < rtol, f"gradient mismatch: rel err {worst:.3e} >= {rtol}"
    return worst
