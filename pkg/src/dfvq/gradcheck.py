"""Central-difference verification of recorded gradients."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor, record


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Compare tape gradients of ``sum(fn(*inputs))`` against central differences.

    ``fn`` maps the given tensors to a tensor; it is reduced to a scalar by
    summation. Returns the max over all input elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    xs = []
    for t in inputs:
        t = t if isinstance(t, Tensor) else Tensor(t)
        t.requires_grad = True
        t.grad = None
        xs.append(t)

    with record() as tape:
        out = fn(*xs).sum()
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    def scalar() -> float:
        val = float(fn(*xs).sum().data)
        if not np.isfinite(val):
            raise NumericError("non-finite value during finite-difference probe")
        return val

    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = scalar()
            flat[i] = orig - eps
            f_minus = scalar()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
