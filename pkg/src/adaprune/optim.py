"""Momentum SGD and a step learning-rate schedule."""
import numpy as np

from .errors import UsageError


class SGD:
    """Classical momentum: ``v <- momentum * v + grad``; ``p <- p - lr * v``.

    Velocity buffers are keyed by parameter name so they survive a checkpoint
    round trip. Frozen parameters are skipped entirely.
    """

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise UsageError("SGD: parameter names must be unique")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.frozen:
                continue
            if p.grad is None:
                raise UsageError(f"SGD: parameter {p.name!r} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(p.name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocity[p.name] = v
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def state_arrays(self):
        return {f"optim/{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays):
        for key, value in arrays.items():
            if key.startswith("optim/"):
                self.velocity[key[len("optim/"):]] = np.array(value, copy=True)


def step_lr(base_lr, epoch, step_epochs, gamma=0.1):
    """Learning rate for ``epoch`` under a divide-every-``step_epochs`` schedule."""
    if step_epochs <= 0:
        return base_lr
    return base_lr * gamma ** (epoch // step_epochs)
