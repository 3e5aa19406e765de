import numpy as np
import pytest

from moeut import tensor as T


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(arrays)`` w.r.t. every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(arrays)
            a[i] = old - h
            fm = f(arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_gradients(op, arrays, seed=0, tol=1e-6):
    """Compare tape gradients of ``sum(w * op(*tensors))`` with finite differences (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[T.Tensor(a) for a in arrays])
    w = np.random.default_rng(seed + 1000).standard_normal(probe.shape)

    def f(arrs):
        return float((op(*[T.Tensor(a) for a in arrs]).data * w).sum())

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Graph() as g:
        out = op(*leaves)
        loss = (out * T.Tensor(w)).sum()
    g.backward(loss)
    num = numeric_grad(f, arrays)
    for leaf, n in zip(leaves, num):
        got = leaf.grad if leaf.grad is not None else np.zeros_like(n)
        assert rel_err(got, n) < tol, (rel_err(got, n), got, n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
