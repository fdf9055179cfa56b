"""Saliency-and-pruning modules: per-channel saliency, differentiable
binarization, and the gated batch-normalized convolution."""
import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels, ops
from .autodiff import Parameter, Tensor, is_grad_enabled, make_result
from .errors import ConfigError, DimensionError, UsageError
from .layers import Module


class Variant(str, enum.Enum):
    SANP = "sanp"
    FIXED_K = "fixed_k"
    STATIC = "static"
    UNPRUNED = "unpruned"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(f"unknown variant {value!r}; expected one of {[v.value for v in cls]}") from None


@dataclass
class BinarizerConfig:
    a: float = 1.2
    b: float = 0.1
    noise_std: float = 1.0
    s1_mix_prob: float = 0.5
    rng_seed: int = 0
    # one Bernoulli draw per layer per batch unless set
    per_element_mix: bool = False

    def __post_init__(self):
        if self.a <= 0:
            raise ConfigError(f"binarizer: a must be > 0, got {self.a}")
        if not 0.0 <= self.s1_mix_prob <= 1.0:
            raise ConfigError(f"binarizer: s1_mix_prob must lie in [0, 1], got {self.s1_mix_prob}")
        if self.noise_std < 0:
            raise ConfigError("binarizer: noise_std must be >= 0")


def hidden_width(c_out, reduction_rate):
    if reduction_rate < 1:
        raise ConfigError(f"reduction rate must be a positive int, got {reduction_rate}")
    return max(1, c_out // reduction_rate)


class SaliencyHead(Module):
    """Two-layer bottleneck ``W2 relu(W1 d)`` mapping a channel descriptor of the
    layer input to one score per output channel.

    With ``bias=True`` both layers carry a bias; the output bias starts at
    ``out_bias_init`` so a freshly attached head scores every channel alike.
    """

    def __init__(self, c_in, c_out, reduction_rate=16, bias=True, rng=None, out_bias_init=1.0, out_init_std=0.01):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden_width(c_out, reduction_rate)
        self.reduction_rate = reduction_rate
        self.W1 = Parameter(rng.normal(0.0, math.sqrt(2.0 / c_in), (hidden, c_in)))
        self.W2 = Parameter(rng.normal(0.0, out_init_std, (c_out, hidden)))
        if bias:
            self.b1 = Parameter(np.zeros(hidden))
            self.b2 = Parameter(np.full(c_out, float(out_bias_init)))
        else:
            self.b1 = None
            self.b2 = None

    @property
    def c_in(self):
        return self.W1.shape[1]

    @property
    def c_out(self):
        return self.W2.shape[0]

    def __call__(self, d):
        if d.shape[1] != self.c_in:
            raise DimensionError(f"saliency head expects {self.c_in} input channels, got {d.shape[1]}")
        return ops.linear(ops.relu(ops.linear(d, self.W1, self.b1)), self.W2, self.b2)

    def flops(self):
        """FC cost in the same convention as conv layers: (inputs + 1) * outputs."""
        hidden = self.W1.shape[0]
        return (self.c_in + 1) * hidden + (hidden + 1) * self.c_out


def channel_descriptor(x):
    """Spatial mean of every channel, ``[N, C, H, W] -> [N, C]``."""
    return ops.global_avg_pool(x)


def saturating_sigmoid(s, a=1.2, b=0.1, noise=None):
    """``clamp(a * sigmoid(s + noise) - b, 0, 1)``."""
    z = s if noise is None else ops.add(s, noise)
    return ops.clip(ops.add(ops.mul(ops.sigmoid(z), a), -b), 0.0, 1.0)


def clean_decisions(s, cfg):
    """Noise-free rounding of the saturating sigmoid: the inference-time code."""
    return np.clip(cfg.a * ops._sigmoid(s) - cfg.b, 0.0, 1.0) > 0.5


def binarize(s, cfg, training, rng=None, use_s1=None, variant=None):
    """Turn saliency scores into gate values.

    Returns ``(gate, s1, hard)``: the gate Tensor used in the forward pass, the
    continuous surrogate (None in eval mode) and the boolean rounding of s1
    (noisy in training).
    In training the gate is s1 or its rounding (chosen with probability
    ``s1_mix_prob``); gradients always follow s1. ``use_s1`` forces the branch.
    """
    if variant is not None and Variant.parse(variant) is Variant.FIXED_K:
        raise UsageError("binarize: FIXED_K layers select channels with fixed_k_select")
    if not training:
        hard = clean_decisions(s.data, cfg)
        return Tensor(hard.astype(s.data.dtype)), None, hard
    if rng is None:
        raise UsageError("binarize: training mode needs an rng")
    noise = rng.normal(0.0, cfg.noise_std, s.shape) if cfg.noise_std > 0 else None
    s1 = saturating_sigmoid(s, cfg.a, cfg.b, noise)
    hard = s1.data > 0.5
    s2 = hard.astype(s1.data.dtype)
    if cfg.per_element_mix and use_s1 is None:
        pick = rng.random(s.shape) < cfg.s1_mix_prob
        return ops.straight_through(s1, np.where(pick, s1.data, s2)), s1, hard
    if use_s1 is None:
        use_s1 = rng.random() < cfg.s1_mix_prob
    if use_s1:
        return s1, s1, hard
    return ops.straight_through(s1, s2), s1, hard


def round_half_up(x):
    return int(math.floor(x + 0.5))


def fixed_k_select(s, k_fraction):
    """Keep the ``round(k_fraction * C)`` highest-scoring channels of each row.

    Ties go to the lower channel index. ``s`` is an array ``[..., C]``.
    """
    s = np.asarray(s)
    if not 0.0 < k_fraction <= 1.0:
        raise ConfigError(f"fixed_k: k_fraction must lie in (0, 1], got {k_fraction}")
    c = s.shape[-1]
    keep = round_half_up(k_fraction * c)
    if keep == 0:
        raise ConfigError(f"fixed_k: k_fraction={k_fraction} keeps no channel of a {c}-channel layer")
    order = np.argsort(-s, axis=-1, kind="stable")[..., :keep]
    out = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(out, order, True, axis=-1)
    return out


class SPM(Module):
    """Per-layer saliency-and-pruning state.

    After each forward the attributes ``last_s`` (Tensor ``[N, C]``), ``last_s1``
    (Tensor or None), ``last_b`` (gate Tensor), ``last_hard`` (bool
    ``[N, C]``, the binary code of this pass) and ``last_clean`` (the
    noise-free code) hold the most recent saliency and decisions.
    """

    def __init__(
        self,
        c_in,
        c_out,
        layer_id,
        variant=Variant.SANP,
        binarizer=None,
        reduction_rate=16,
        k_fraction=0.5,
        rng=None,
        head_bias=True,
    ):
        super().__init__()
        variant = Variant.parse(variant)
        if variant is Variant.UNPRUNED:
            raise ConfigError("an SPM cannot use the UNPRUNED variant")
        rng = rng if rng is not None else np.random.default_rng(layer_id)
        self.layer_id = layer_id
        self.variant = variant
        self.binarizer = binarizer or BinarizerConfig()
        self.k_fraction = k_fraction
        self.head = SaliencyHead(c_in, c_out, reduction_rate, bias=head_bias, rng=rng)
        if variant is Variant.STATIC:
            self.static_vector = Parameter(np.abs(rng.normal(0.0, 1.0, c_in)))
        else:
            self.static_vector = None
        if variant is Variant.FIXED_K:
            fixed_k_select(np.zeros(c_out), k_fraction)  # validates k against this width
        self.rng = np.random.default_rng(self.binarizer.rng_seed + 7919 * (layer_id + 1))
        self.forced = None
        self.force_branch = None
        self.sink = None
        self.last_s = self.last_s1 = self.last_b = self.last_hard = self.last_clean = None

    def predict_saliency(self, x):
        n = x.shape[0]
        if self.variant is Variant.STATIC:
            s = self.head(ops.reshape_rows(self.static_vector, (1, self.head.c_in)))
            return ops.repeat_rows(s, n)
        if x.shape[1] != self.head.c_in:
            raise DimensionError(f"SPM {self.layer_id}: input has {x.shape[1]} channels, head expects {self.head.c_in}")
        return self.head(channel_descriptor(x))

    def decide(self, x):
        """Compute saliency and gate for input ``x`` before the conv runs."""
        n, c = x.shape[0], self.head.c_out
        if self.forced is not None:
            # scalars or arrays broadcastable to [N, C]
            s_val, b_val = self.forced
            s = Tensor(np.broadcast_to(np.asarray(s_val, dtype=np.float64), (n, c)).copy())
            b = Tensor(np.broadcast_to(np.asarray(b_val, dtype=np.float64), (n, c)).copy())
            s1, hard = None, b.data != 0
        else:
            s = self.predict_saliency(x)
            if self.variant is Variant.FIXED_K:
                hard = fixed_k_select(s.data, self.k_fraction)
                b, s1 = Tensor(hard.astype(s.data.dtype)), None
            else:
                b, s1, hard = binarize(
                    s, self.binarizer, self.training, self.rng, use_s1=self.force_branch, variant=self.variant
                )
        self.last_s, self.last_s1, self.last_b, self.last_hard = s, s1, b, hard
        self.last_clean = hard if s1 is None else clean_decisions(s.data, self.binarizer)
        if self.sink is not None:
            self.sink(self.layer_id, hard)
        return s, b, hard

    def extra_state(self):
        return {"rng": self.rng.bit_generator.state}

    def load_extra_state(self, state):
        if "rng" in state:
            self.rng.bit_generator.state = state["rng"]


def _skip_path(x, unit, gate, mask):
    """Inference forward that only convolves channels with a nonzero gate."""
    w = unit.weight.data
    n = x.shape[0]
    c_out, _, k, _ = w.shape
    cols = kernels.im2col(x.data, k, unit.stride, unit.padding)
    ho = kernels.conv_output_size(x.shape[2], k, unit.stride, unit.padding)
    wo = kernels.conv_output_size(x.shape[3], k, unit.stride, unit.padding)
    prod = kernels.conv_channels(w.reshape(c_out, -1), cols, mask)
    out = np.zeros((n, c_out, ho, wo), dtype=x.data.dtype)
    ni, ci = np.nonzero(mask)
    if ni.size:
        planes = prod[ni, ci].reshape(-1, ho, wo)
        col = (slice(None), None, None)
        y = kernels.bn_eval_affine(
            planes,
            unit.running_mean[ci][col],
            unit.running_var[ci][col],
            unit.gamma.data[ci][col],
            unit.beta.data[ci][col],
            unit.eps,
        )
        out[ni, ci] = y * gate[ni, ci][col]
    return make_result(out, (), None, "gated_conv")


def dense_gated_conv(x, unit, s, b):
    """Reference path: full conv and BN, then every channel scaled by ``s * b``."""
    y = ops.batch_norm(
        ops.conv2d(x, unit.weight, None, unit.stride, unit.padding),
        unit.gamma,
        unit.beta,
        unit.running_mean,
        unit.running_var,
        unit.training,
        unit.eps,
        unit.bn_momentum,
    )
    return ops.scale_channels(y, ops.mul(s, b))


def gated_conv_layer(x, unit, spm):
    """Gated conv: channel i is ``s_i * b_i * BN(conv_i(x))``, or all zeros when b_i == 0.

    During inference without gradient recording the zero channels are never
    convolved. Training needs every channel for the batch statistics, so it
    runs the dense path.
    """
    s, b, _ = spm.decide(x)
    if not unit.training and not is_grad_enabled():
        gate = s.data * b.data
        return _skip_path(x, unit, gate, b.data != 0)
    return dense_gated_conv(x, unit, s, b)
