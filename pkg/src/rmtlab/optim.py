"""Adam optimizer, gradient clipping and the plateau learning-rate rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers plus shared hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Aborts with :class:`NumericError` naming the parameter if a gradient
    is non-finite (training instabilities surface here, not as silent NaNs).
    """
    if state.lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} does not "
                             f"match parameter {name!r} {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = {}
        for name, p in self.params.items():
            if p.grad is not None:
                grads[name] = p.grad
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


class PlateauScheduler:
    """Halve the learning rate when the tracked metric stops improving.

    ``step`` is called once per validation round with a metric where lower
    is better; after ``patience`` rounds without improvement the rate is
    multiplied by ``decay`` and the counter resets.
    """

    def __init__(self, lr: float, decay: float = 0.5, patience: int = 10,
                 min_lr: float = 0.0):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must be in (0, 1)")
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.min_lr = min_lr
        self.best = float("inf")
        self.bad_rounds = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_rounds = 0
        else:
            self.bad_rounds += 1
            if self.bad_rounds >= self.patience:
                self.lr = max(self.lr * self.decay, self.min_lr)
                self.bad_rounds = 0
        return self.lr

    def state_dict(self):
        return {"lr": self.lr, "best": self.best, "bad_rounds": self.bad_rounds}

    def load_state_dict(self, d):
        self.lr = d["lr"]
        self.best = d["best"]
        self.bad_rounds = d["bad_rounds"]
