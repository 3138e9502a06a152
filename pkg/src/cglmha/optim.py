"""Cross-entropy loss, Adam with decoupled weight decay, and early stopping."""
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .tensor import Tensor


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"logits {logits.shape} and labels {labels.shape} disagree")
    C = logits.shape[1]
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= C:
        raise ContractError(f"labels must be integers in [0, {C})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    picked = T.reduce_sum(T.log_softmax(logits, axis=1) * T.constant_like(logits, onehot))
    return T.scale(picked, -1.0 / len(labels))


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("Adam needs lr > 0, eps > 0, weight_decay >= 0")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
    frozen_rows: Optional[Mapping[str, Iterable[int]]] = None,
) -> AdamState:
    """Apply one Adam update in place to every parameter that has a gradient.

    Moments use bias correction; weight decay is applied after the adaptive
    step and scaled by the learning rate. Rows listed in ``frozen_rows`` are
    set back to zero afterwards.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        theta -= (hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(theta.dtype)
        if hyper.weight_decay:
            theta -= (hyper.lr * hyper.weight_decay * theta).astype(theta.dtype)
    for name, rows in (frozen_rows or {}).items():
        if name in params:
            params[name].data[list(rows)] = 0
    return state


class Adam:
    """Stateful wrapper: reads ``.grad`` from the parameters it owns."""

    def __init__(self, params: Mapping[str, Tensor], hyper: Optional[AdamHyper] = None, frozen_rows=None):
        self.params = dict(params)
        self.hyper = hyper or AdamHyper()
        self.state = AdamState()
        self.frozen_rows = dict(frozen_rows or {})

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.hyper, self.frozen_rows)


@dataclass
class EarlyStopState:
    patience: int = 5
    best_val_loss: float = math.inf
    epochs_since_improve: int = 0


def early_stop_update(state: EarlyStopState, val_loss: float) -> str:
    """Record one epoch's validation loss; returns ``"stop"`` or ``"continue"``.

    Only a strict decrease of the best loss counts as improvement.
    """
    if val_loss < state.best_val_loss:
        state.best_val_loss = float(val_loss)
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve += 1
    return "stop" if state.epochs_since_improve >= state.patience else "continue"
