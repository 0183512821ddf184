"""SGD with momentum, weight decay, and a milestone step-decay schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor


class SgdState:
    """Momentum-SGD state bound to a fixed parameter list.

    Update rule per parameter: ``v = momentum*v + (grad + weight_decay*p)``
    then ``p -= lr(epoch)*v``. The learning rate divides the base rate by
    ``decay_factor`` at each epoch milestone, so it never increases.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        learning_rate: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        epoch_milestones: Sequence[int] = (),
        decay_factor: float = 10.0,
    ):
        if learning_rate < 0:
            raise ContractError(f"learning rate must be non-negative, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ContractError(f"weight decay must be non-negative, got {weight_decay}")
        if decay_factor <= 0:
            raise ContractError(f"decay factor must be positive, got {decay_factor}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.epoch_milestones = sorted(int(m) for m in epoch_milestones)
        self.decay_factor = float(decay_factor)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.epoch_milestones if epoch >= m)
        return self.learning_rate / self.decay_factor ** drops


def sgd_step(state: SgdState, epoch: int) -> None:
    """One in-place update of every parameter from its populated gradient."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    lr = state.lr_at(epoch)
    for i, p in enumerate(state.params):
        if p.grad is None:
            raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient; run backward first")
        v = state.velocity[i]
        v *= state.momentum
        v += p.grad + state.weight_decay * p.data
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
