"""Hot array kernels with numba and pure-numpy implementations.

Every public function dispatches on the active backend (see :func:`set_backend`).
Both backends compute identical layouts; the per-channel conv kernel is
bit-identical whether a channel is computed alone or as part of a dense pass,
which is what lets pruned channels be skipped without changing the result.
"""
from contextlib import contextmanager

import numpy as np

from ._jit import DEFAULT_BACKEND, HAVE_NUMBA, njit
from .errors import ConfigError

_backend = DEFAULT_BACKEND


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ConfigError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is unavailable or disabled")
    _backend = name


@contextmanager
def backend(name):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


# --------------------------------------------------------------------- im2col
# cols[n, ci*k*k + kh*k + kw, oh*Wo + ow] = xpad[n, ci, oh*s + kh, ow*s + kw]


def _im2col_numpy(x, k, stride, padding):
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


@njit(cache=True)
def _im2col_numba(x, k, stride, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = np.zeros((n, c * k * k, ho * wo), dtype=x.dtype)
    for b in range(n):
        for ci in range(c):
            for kh in range(k):
                for kw in range(k):
                    row = (ci * k + kh) * k + kw
                    for oh in range(ho):
                        ih = oh * stride + kh - padding
                        if ih < 0 or ih >= h:
                            continue
                        for ow in range(wo):
                            iw = ow * stride + kw - padding
                            if iw >= 0 and iw < w:
                                cols[b, row, oh * wo + ow] = x[b, ci, ih, iw]
    return cols


def im2col(x, k, stride, padding):
    x = np.ascontiguousarray(x)
    if _backend == "numba":
        return _im2col_numba(x, k, stride, padding)
    return _im2col_numpy(x, k, stride, padding)


def _col2im_numpy(cols, x_shape, k, stride, padding):
    n, c, h, w = x_shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for kh in range(k):
        for kw in range(k):
            xp[:, :, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride] += cols[:, :, kh, kw]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


@njit(cache=True)
def _col2im_numba(cols, n, c, h, w, k, stride, padding):
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    x = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for ci in range(c):
            for kh in range(k):
                for kw in range(k):
                    row = (ci * k + kh) * k + kw
                    for oh in range(ho):
                        ih = oh * stride + kh - padding
                        if ih < 0 or ih >= h:
                            continue
                        for ow in range(wo):
                            iw = ow * stride + kw - padding
                            if iw >= 0 and iw < w:
                                x[b, ci, ih, iw] += cols[b, row, oh * wo + ow]
    return x


def col2im(cols, x_shape, k, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add columns back to an input-shaped array."""
    if _backend == "numba":
        n, c, h, w = x_shape
        return _col2im_numba(np.ascontiguousarray(cols), n, c, h, w, k, stride, padding)
    return _col2im_numpy(cols, x_shape, k, stride, padding)


# ----------------------------------------------------------- conv mat-products


def conv_gemm(w2d, cols):
    """Dense conv product ``w2d @ cols[n]`` for all samples, one batched GEMM."""
    return np.matmul(w2d, cols)


def _conv_channels_numpy(w2d, cols, mask):
    n = cols.shape[0]
    c_out = w2d.shape[0]
    out = np.zeros((n, c_out, cols.shape[2]), dtype=cols.dtype)
    for c in range(c_out):
        if mask is None:
            out[:, c] = w2d[c] @ cols
            continue
        idx = np.flatnonzero(mask[:, c])
        if idx.size:
            out[idx, c] = w2d[c] @ cols[idx]
    return out


@njit(cache=True)
def _conv_channels_numba(w2d, cols, mask):
    n = cols.shape[0]
    c_out = w2d.shape[0]
    out = np.zeros((n, c_out, cols.shape[2]), dtype=cols.dtype)
    for b in range(n):
        for c in range(c_out):
            if mask[b, c]:
                out[b, c, :] = np.dot(w2d[c], cols[b])
    return out


def conv_channels(w2d, cols, mask=None):
    """Per-(sample, channel) conv product; planes with ``mask == False`` stay zero
    and cost nothing.

    Each plane is one vector-matrix product, so its value does not depend on
    which other planes are computed.
    """
    w2d = np.ascontiguousarray(w2d)
    cols = np.ascontiguousarray(cols)
    if _backend == "numba":
        if mask is None:
            mask = np.ones((cols.shape[0], w2d.shape[0]), dtype=np.bool_)
        return _conv_channels_numba(w2d, cols, np.ascontiguousarray(mask, dtype=np.bool_))
    return _conv_channels_numpy(w2d, cols, mask)


# ------------------------------------------------------------------- max pool


def _maxpool_numpy(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


@njit(cache=True)
def _maxpool_numba(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ci, i * k, j * k]
                    bi = 0
                    for di in range(k):
                        for dj in range(k):
                            v = x[b, ci, i * k + di, j * k + dj]
                            if v > best:
                                best = v
                                bi = di * k + dj
                    out[b, ci, i, j] = best
                    arg[b, ci, i, j] = bi
    return out, arg


def maxpool_forward(x, k):
    """Non-overlapping k x k max pool (stride k, floor). Returns (out, argmax-in-window)."""
    if _backend == "numba":
        return _maxpool_numba(np.ascontiguousarray(x), k)
    return _maxpool_numpy(x, k)


def _maxpool_backward_numpy(grad, arg, x_shape, k):
    n, c, h, w = x_shape
    ho, wo = grad.shape[2], grad.shape[3]
    onehot = np.zeros((n, c, ho, wo, k * k), dtype=grad.dtype)
    np.put_along_axis(onehot, arg[..., None], grad[..., None], axis=-1)
    onehot = onehot.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    dx = np.zeros(x_shape, dtype=grad.dtype)
    dx[:, :, : ho * k, : wo * k] = onehot
    return dx


@njit(cache=True)
def _maxpool_backward_numba(grad, arg, n, c, h, w, k):
    dx = np.zeros((n, c, h, w), dtype=grad.dtype)
    ho, wo = grad.shape[2], grad.shape[3]
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = arg[b, ci, i, j]
                    dx[b, ci, i * k + a // k, j * k + a % k] += grad[b, ci, i, j]
    return dx


def maxpool_backward(grad, arg, x_shape, k):
    if _backend == "numba":
        n, c, h, w = x_shape
        return _maxpool_backward_numba(np.ascontiguousarray(grad), np.ascontiguousarray(arg), n, c, h, w, k)
    return _maxpool_backward_numpy(grad, arg, x_shape, k)


# --------------------------------------------------------------- batch norm


def bn_eval_affine(x, mean, var, gamma, beta, eps):
    """Inference-mode batch norm; parameter arrays must already broadcast against x.

    Shared by the dense op and the channel-skipping path so both round identically.
    """
    return (x - mean) / np.sqrt(var + eps) * gamma + beta
