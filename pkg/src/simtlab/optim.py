"""Adam optimizer with bias correction over named parameter lists."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import NumericError, ShapeError


class AdamState:
    """Per-parameter moment buffers plus the step counter.

    Defaults follow the optimizer's published constants; only the learning
    rate is routinely overridden.
    """

    def __init__(self, params, lr: float = 0.0004,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.params = [item if isinstance(item, tuple) else (f"param{i}", item)
                       for i, item in enumerate(params)]
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self._scratch = {}

    def scratch(self, name, shape):
        buf = self._scratch.get(name)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self._scratch[name] = buf
        return buf

    def tensors(self):
        return [p for _, p in self.params]


def adam_step(state: AdamState, params=None, grads=None) -> None:
    """Apply one bias-corrected Adam update in place.

    By default gradients are read from each parameter's ``grad`` buffer
    (None counts as zero). A NaN/Inf gradient rejects the whole update.
    """
    if params is None:
        pairs = state.params
    else:
        pairs = [item if isinstance(item, tuple) else (f"param{i}", item)
                 for i, item in enumerate(params)]
    if grads is not None and len(grads) != len(pairs):
        raise ShapeError("adam_step: grads length does not match params")

    resolved = []
    for i, (name, p) in enumerate(pairs):
        g = grads[i] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param '{name}' {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for '{name}'; update rejected")
        resolved.append((name, p, g))

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p, g in resolved:
        m = state.m[name]
        v = state.v[name]
        s = state.scratch(name, p.data.shape)
        np.multiply(m, state.beta1, out=m)
        np.multiply(g, 1.0 - state.beta1, out=s)
        np.add(m, s, out=m)
        np.multiply(v, state.beta2, out=v)
        np.multiply(g, g, out=s)
        np.multiply(s, 1.0 - state.beta2, out=s)
        np.add(v, s, out=v)
        np.divide(v, bc2, out=s)
        np.sqrt(s, out=s)
        np.add(s, state.eps, out=s)
        np.divide(m, s, out=s)
        np.multiply(s, state.lr / bc1, out=s)
        np.subtract(p.data, s, out=p.data)
