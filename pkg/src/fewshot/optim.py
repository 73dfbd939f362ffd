"""SGD with momentum and weight decay, plus the step-decay schedule."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)
    epoch: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params, state):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter '{name}' has no gradient")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + p.grad + state.weight_decay * p.data
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v


def lr_at_epoch(base_lr, epoch, decay_rate, decay_every):
    """Step-decayed learning rate: base_lr * decay_rate^(epoch // decay_every)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if decay_every < 1:
        raise ConfigError(f"decay_every must be >= 1, got {decay_every}")
    return base_lr * decay_rate ** (epoch // decay_every)
