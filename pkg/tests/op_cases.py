"""Random finite-difference cases for every registered autodiff op.

Each case draws inputs in [-2, 2] (moved away from kinks/singularities where
the op has them) and a fixed random cotangent ``R``; the checked scalar is
``sum(op(inputs) * R)``.
"""

from __future__ import annotations

import numpy as np

from melon import autodiff as ad
from melon.autodiff import Tape
from melon.gradcheck import numeric_grad, rel_error

KINK_TOL = 1e-4
SMOOTH_TOL = 1e-6


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _u(rng, *shape):
    return rng.uniform(-2.0, 2.0, shape)


def cases(rng: np.random.Generator):
    """name -> (inputs, f(leaves) -> node, tolerance)."""
    idx = rng.integers(0, 12, size=(3, 4))
    return {
        "add": ([_u(rng, 3, 4), _u(rng, 4)], lambda a, b: a + b, SMOOTH_TOL),
        "sub": ([_u(rng, 3, 1), _u(rng, 3, 4)], lambda a, b: a - b, SMOOTH_TOL),
        "mul": ([_u(rng, 3, 4), _u(rng, 3, 4)], lambda a, b: a * b, SMOOTH_TOL),
        "neg": ([_u(rng, 5)], lambda a: -a, SMOOTH_TOL),
        "matmul": ([_u(rng, 3, 4), _u(rng, 4, 2)], lambda a, b: a @ b, SMOOTH_TOL),
        "matmul_batched": ([_u(rng, 2, 3, 4), _u(rng, 2, 4, 2)], lambda a, b: a @ b, SMOOTH_TOL),
        "concat": ([_u(rng, 2, 3), _u(rng, 2, 2)], lambda a, b: ad.concat([a, b], axis=1), SMOOTH_TOL),
        "sum": ([_u(rng, 3, 4)], lambda a: a.sum(axis=0), SMOOTH_TOL),
        "mean": ([_u(rng, 3, 4)], lambda a: a.mean(axis=1, keepdims=True), SMOOTH_TOL),
        "relu": ([_away_from_zero(_u(rng, 3, 4))], ad.relu, KINK_TOL),
        "leaky_relu": ([_away_from_zero(_u(rng, 3, 4))], lambda a: ad.leaky_relu(a, 0.2), KINK_TOL),
        "sigmoid": ([_u(rng, 3, 4)], ad.sigmoid, SMOOTH_TOL),
        "softplus": ([_u(rng, 3, 4)], ad.softplus, SMOOTH_TOL),
        "log": ([rng.uniform(0.5, 2.0, (3, 4))], ad.log, SMOOTH_TOL),
        "exp": ([_u(rng, 3, 4)], ad.exp, SMOOTH_TOL),
        "softmax": ([_u(rng, 3, 4)], lambda a: ad.softmax(a, axis=1), SMOOTH_TOL),
        "broadcast": ([_u(rng, 3, 1)], lambda a: ad.broadcast(a, (2, 3, 4)), SMOOTH_TOL),
        "reshape": ([_u(rng, 3, 4)], lambda a: a.reshape(4, 3), SMOOTH_TOL),
        "getitem": ([_u(rng, 4, 5)], lambda a: a[1:3, ::2], SMOOTH_TOL),
        "getitem_fancy": ([_u(rng, 4, 5)], lambda a: a[np.array([0, 2, 2]), :], SMOOTH_TOL),
        "take": ([_u(rng, 3, 4)], lambda a: ad.take(a, idx), SMOOTH_TOL),
        "scatter_add": ([_u(rng, 3, 4)], lambda a: ad.scatter_add(a, idx, 12), SMOOTH_TOL),
    }


def check_case(inputs, fn, rng: np.random.Generator) -> list[float]:
    """Relative errors (one per input) of autodiff vs central differences."""
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = fn(*leaves)
    R = rng.standard_normal(out.shape)
    loss = (out * R).sum()
    g = tape.backward(loss)

    errs = []
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            t2 = Tape(checked=False)
            args = [t2.const(xk if j == k else inputs[j]) for j in range(len(inputs))]
            return float((fn(*args).value * R).sum())

        errs.append(rel_error(g[leaves[k]], numeric_grad(f, x)))
    return errs
