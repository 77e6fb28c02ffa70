"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

from splitlora import autodiff as ad

STEP = 1e-5


def rel_err(a, n, floor=1e-6):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def sample_coords(shape, k, rng):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= k else rng.choice(size, size=k, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def fd_check(loss_fn, params, k=100, seed=0):
    """Max relative error between tape gradients and central differences.

    ``loss_fn(*tensors)`` must build a scalar loss from trainable tensors
    wrapping ``params`` (a list of arrays).
    """
    rng = np.random.default_rng(seed)
    tensors = [ad.Tensor(p, requires_grad=True) for p in params]
    with ad.Tape() as tape:
        loss = loss_fn(*tensors)
    grads = ad.backward(tape, loss)
    worst = 0.0
    for i, p in enumerate(params):
        for idx in sample_coords(p.shape, k, rng):
            plus, minus = [q.copy() for q in params], [q.copy() for q in params]
            plus[i][idx] += STEP
            minus[i][idx] -= STEP
            lp = loss_fn(*(ad.Tensor(q) for q in plus)).item()
            lm = loss_fn(*(ad.Tensor(q) for q in minus)).item()
            num = (lp - lm) / (2 * STEP)
            worst = max(worst, float(rel_err(grads[tensors[i]][idx], num)))
    return worst
