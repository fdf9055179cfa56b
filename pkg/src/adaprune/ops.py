"""Differentiable operations.

Layer ops take a leading batch axis: images are ``[N, C, H, W]``, vectors
``[N, F]``. There is no general broadcasting; elementwise binary ops need equal
shapes, or a Python scalar / same-shape ndarray constant on one side.
"""
import numpy as np

from . import kernels
from .autodiff import Tensor, as_tensor, is_grad_enabled, make_result
from .errors import ConfigError, DimensionError, UsageError


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_ndim(x, ndim, op):
    if x.ndim != ndim:
        raise DimensionError(f"{op}: expected {ndim}-d input, got shape {x.shape}")


def _is_const(v):
    return not isinstance(v, Tensor)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    if _is_const(b):
        c = np.asarray(b, dtype=a.data.dtype)
        if c.ndim:
            _check_same(a, c, "add")
        return make_result(a.data + c, (a,), lambda g: (g,), "add")
    if _is_const(a):
        return add(b, a)
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b):
    if _is_const(b):
        return add(a, -np.asarray(b))
    return add(a, neg(b))


def mul(a, b):
    if _is_const(b):
        c = np.asarray(b, dtype=a.data.dtype)
        if c.ndim:
            _check_same(a, c, "mul")
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul")
    if _is_const(a):
        return mul(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(x):
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def sigmoid(x):
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is zero wherever the clamp is active."""
    inside = (x.data > lo) & (x.data < hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def straight_through(surrogate, value):
    """Forward ``value``; backward passes the incoming gradient to ``surrogate``
    unchanged."""
    value = np.asarray(value, dtype=surrogate.data.dtype)
    _check_same(surrogate, value, "straight_through")
    return make_result(value.copy(), (surrogate,), lambda g: (g,), "straight_through")


# ------------------------------------------------------------------ reductions


def sum(x):
    shape = x.shape
    return make_result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),), "sum")


def mean(x):
    shape, n = x.shape, x.size
    return make_result(
        np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.data.dtype),), "mean"
    )


def l1_norm(x):
    """Sum of absolute values; subgradient 0 at 0."""
    sign = np.sign(x.data)
    return make_result(np.array(np.abs(x.data).sum()), (x,), lambda g: (g * sign,), "l1_norm")


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy over the batch. ``labels`` are integer class ids."""
    _check_ndim(logits, 2, "softmax_cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape}, expected ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DimensionError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def backward_fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result(np.array(loss), (logits,), backward_fn, "softmax_cross_entropy")


# ---------------------------------------------------------------- layer ops


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for x ``[N, in]``, weight ``[out, in]``."""
    _check_ndim(x, 2, "linear")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[1]} != weight columns {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def backward_fn(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, parents, backward_fn, "linear")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding (no kernel flip).

    When gradients are being recorded the product runs as one batched GEMM;
    otherwise it runs channel by channel through the same kernel the
    channel-skipping path uses, so both agree bit for bit.
    """
    _check_ndim(x, 4, "conv2d")
    _check_ndim(weight, 4, "conv2d")
    n, c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if wc_in != c_in:
        raise DimensionError(f"conv2d: weight expects {wc_in} input channels, input has {c_in}")
    if k != k2:
        raise DimensionError("conv2d: only square kernels are supported")
    if stride < 1:
        raise ConfigError("conv2d: stride must be >= 1")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}+2*{padding}")
    ho = kernels.conv_output_size(h, k, stride, padding)
    wo = kernels.conv_output_size(w, k, stride, padding)
    cols = kernels.im2col(x.data, k, stride, padding)
    w2d = weight.data.reshape(c_out, -1)
    tracking = is_grad_enabled() and (x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad))
    prod = kernels.conv_gemm(w2d, cols) if tracking else kernels.conv_channels(w2d, cols)
    out = prod.reshape(n, c_out, ho, wo)
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def backward_fn(g):
        g2 = g.reshape(n, c_out, ho * wo)
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        dx = kernels.col2im(np.matmul(w2d.T, g2), x.shape, k, stride, padding) if x.requires_grad else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward_fn, "conv2d")


def batch_norm(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """Per-channel batch norm over ``[N, C, H, W]``.

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode (unbiased variance, exponential average with ``momentum``).
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm: eps must be > 0, got {eps}")
    _check_ndim(x, 4, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: affine params must have shape ({c},)")
    gd = gamma.data[None, :, None, None]
    if not training:
        rm = running_mean[None, :, None, None]
        rv = running_var[None, :, None, None]
        out = kernels.bn_eval_affine(x.data, rm, rv, gd, beta.data[None, :, None, None], eps)
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (x.data - rm) * inv

        def backward_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, gamma, beta), backward_eval, "batch_norm")

    if n < 2:
        raise UsageError("batch_norm: training mode needs a batch of at least 2")
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / max(m - 1, 1))

    def backward_fn(g):
        dxhat = g * gd
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gamma, beta), backward_fn, "batch_norm")


def global_avg_pool(x):
    """``[N, C, H, W] -> [N, C]`` spatial mean."""
    _check_ndim(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    hw = h * w
    return make_result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),),
        "global_avg_pool",
    )


def max_pool2d(x, k=2):
    _check_ndim(x, 4, "max_pool2d")
    if x.shape[2] < k or x.shape[3] < k:
        raise DimensionError(f"max_pool2d: window {k} larger than input {x.shape[2:]}")
    out, arg = kernels.maxpool_forward(x.data, k)
    return make_result(out, (x,), lambda g: (kernels.maxpool_backward(g, arg, x.shape, k),), "max_pool2d")


def flatten(x):
    shape = x.shape
    return make_result(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def scale_channels(x, gate):
    """Multiply each ``[H, W]`` plane of x ``[N, C, H, W]`` by ``gate[n, c]``."""
    _check_ndim(x, 4, "scale_channels")
    if gate.shape != x.shape[:2]:
        raise DimensionError(f"scale_channels: gate shape {gate.shape} != {x.shape[:2]}")
    xd, gd = x.data, gate.data

    def backward_fn(g):
        return g * gd[:, :, None, None], (g * xd).sum(axis=(2, 3))

    return make_result(xd * gd[:, :, None, None], (x, gate), backward_fn, "scale_channels")


def repeat_rows(x, n):
    """Tile a ``[1, F]`` row into ``[n, F]``; backward sums over the copies."""
    if x.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"repeat_rows: expected shape (1, F), got {x.shape}")
    return make_result(
        np.repeat(x.data, n, axis=0), (x,), lambda g: (g.sum(axis=0, keepdims=True),), "repeat_rows"
    )


def reshape_rows(x, shape):
    """Reshape a 1-D parameter into ``shape`` (used for static saliency sources)."""
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


__all__ = [
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "clip",
    "straight_through",
    "sum",
    "mean",
    "l1_norm",
    "softmax_cross_entropy",
    "linear",
    "conv2d",
    "batch_norm",
    "global_avg_pool",
    "max_pool2d",
    "flatten",
    "scale_channels",
    "repeat_rows",
    "reshape_rows",
    "as_tensor",
]
