"""Adam with bias correction, in functional and stateful form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, ShapeError, Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns (new_params, state).

    ``params`` and ``grads`` are aligned lists of numpy arrays. The state's
    moment buffers are created on first use and advanced in place; parameter
    arrays are returned fresh.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} (index {i})")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at parameter index {i}")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        new_params.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
    return new_params, state


class Adam:
    """Stateful wrapper applying :func:`adam_step` to Tensor parameters."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr_scale: float = 1.0) -> None:
        base_lr = self.state.lr
        self.state.lr = base_lr * lr_scale
        try:
            new_vals, _ = adam_step(
                [p.data for p in self.params],
                [p.grad for p in self.params],
                self.state,
            )
        finally:
            self.state.lr = base_lr
        for p, v in zip(self.params, new_vals):
            p.data = v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
