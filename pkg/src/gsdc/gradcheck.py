"""Central finite-difference gradient checks (run in wide mode)."""

from __future__ import annotations

import numpy as np

from .tensor import Graph, Tensor, backward


def relative_error(analytic, numeric):
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(fn, arrays, wrt, h=1e-4, entries=None):
    """Central differences of scalar ``fn(*tensors)`` w.r.t. ``arrays[wrt]``.

    ``entries`` optionally restricts the check to a list of flat indices;
    the result then has one value per entry.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[wrt].reshape(-1)
    idx = range(target.size) if entries is None else entries
    out = []
    for i in idx:
        old = target[i]
        target[i] = old + h
        fp = _eval(fn, base)
        target[i] = old - h
        fm = _eval(fn, base)
        target[i] = old
        out.append((fp - fm) / (2 * h))
    out = np.array(out)
    return out.reshape(base[wrt].shape) if entries is None else out


def _eval(fn, arrays):
    with Graph(wide=True):
        return float(fn(*[Tensor(a) for a in arrays]).data)


def analytic_grads(fn, arrays):
    with Graph(wide=True) as g:
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        loss = fn(*ts)
        return backward(loss, g, inputs=ts)


def check_gradients(fn, arrays, h=1e-4):
    """Largest relative error over every input of ``fn``."""
    grads = analytic_grads(fn, arrays)
    return max(relative_error(g, numeric_grad(fn, arrays, i, h)) for i, g in enumerate(grads))
