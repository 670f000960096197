"""Named parameter store with Adam state."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class ParamStore:
    """Named trainable tensors plus per-parameter Adam moment buffers.

    Names are unique; moment buffers always match their parameter's shape.
    ``step`` counts applied Adam updates (zero means untrained).
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Current gradients; missing grads are returned as zeros."""
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One Adam update (bias-corrected) applied in place.

    A non-finite gradient anywhere skips the whole step and logs the event;
    the step counter is only advanced on applied updates.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("adam_step: non-finite gradient for %s; step %d skipped",
                        name, store.step + 1)
            return store
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = store.params[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
