"""Tensor, tape and reverse-mode backward pass."""
import threading
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, NonFiniteError, UsageError

DEFAULT_DTYPE = np.float64


class _Record:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered log of differentiable ops executed since the last backward."""

    def __init__(self):
        self.records = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def get_tape():
    return _state.tape


def is_grad_enabled():
    return _state.grad_enabled


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """n-d array with an optional gradient slot.

    Gradient-tracking results are produced only by the functions in
    :mod:`adaprune.ops`; the arithmetic dunders below delegate there.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)


class Parameter(Tensor):
    """Trainable tensor. ``frozen`` parameters still receive gradients but the
    optimizer leaves them alone."""

    def __init__(self, data, name="", frozen=False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.frozen = frozen

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward_fn, op):
    """Wrap an op's forward value and record it on the tape when needed.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite value in output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        _state.tape.records.append(_Record(out, parents, backward_fn, op))
    return out


def backward(loss):
    """Populate ``.grad`` of every tracked tensor that ``loss`` depends on.

    Walks the tape in reverse execution order and consumes it.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not tape.records:
        raise UsageError("backward() called on an empty tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for rec in reversed(tape.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward_fn(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is not None and parent.requires_grad:
                    parent._accumulate(pg)
    finally:
        tape.clear()
