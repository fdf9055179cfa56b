"""Module base class and the plain building blocks."""
import math

import numpy as np

from . import ops
from .autodiff import Parameter


class Module:
    """Holds Parameters, child Modules and named array buffers.

    Discovery walks instance attributes in definition order, including lists
    of Modules, so naming is deterministic.
    """

    def __init__(self):
        self.training = True
        self._buffers = {}

    def register_buffer(self, name, value):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _members(self):
        for key, value in vars(self).items():
            if key.startswith("_") or key == "sink":
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix=""):
        for key, value in self._members():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in self._members():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, value in self._members():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name


class ConvBN(Module):
    """Bias-free conv followed by batch norm, optionally gated by an SPM."""

    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, eps=1e-5, bn_momentum=0.1, layer_id=0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * k * k
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, k, k)))
        self.gamma = Parameter(np.ones(c_out))
        self.beta = Parameter(np.zeros(c_out))
        self.register_buffer("running_mean", np.zeros(c_out))
        self.register_buffer("running_var", np.ones(c_out))
        self.stride = stride
        self.padding = padding
        self.eps = eps
        self.bn_momentum = bn_momentum
        self.layer_id = layer_id
        self.spm = None

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def kernel(self):
        return self.weight.shape[2]

    def __call__(self, x):
        if self.spm is not None:
            from .spm import gated_conv_layer

            return gated_conv_layer(x, self, self.spm)
        y = ops.conv2d(x, self.weight, None, self.stride, self.padding)
        return ops.batch_norm(
            y, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.eps, self.bn_momentum
        )


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_out, n_in)))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)
