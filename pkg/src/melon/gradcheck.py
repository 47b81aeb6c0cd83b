"""Central finite differences and the error measure used to compare gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                 coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (all coordinates, or just ``coords``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for k in idx:
        keep = flat[k]
        flat[k] = keep + h
        fp = f(x)
        flat[k] = keep - h
        fm = f(x)
        flat[k] = keep
        out[k] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def rel_error(a, b, floor: float = 1e-8) -> float:
    """``max|a - b| / max(max|a|, max|b|, floor)`` - relative to the gradient's scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), floor)
    return float(np.abs(a - b).max(initial=0.0)) / scale
