"""FLOPs accounting, running cost estimate, adaptive cost weight and the
multi-task loss."""
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, InvariantError, UsageError

DEFAULT_LAMBDA0 = 0.01


@dataclass(frozen=True)
class LayerCostSpec:
    """Geometry of one conv layer.

    ``gated`` layers read their output activity from the SPM decisions with the
    same ``layer_id``; ungated layers (shortcut convs) are always dense.
    ``input_from`` names the gated layers whose union of active channels forms
    this layer's active inputs; None means the input is dense.
    """

    layer_id: int
    H_out: int
    W_out: int
    C_in: int
    C_out: int
    k: int
    gated: bool = True
    input_from: tuple = None

    def __post_init__(self):
        for name in ("H_out", "W_out", "C_in", "C_out", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"LayerCostSpec.{name} must be >= 1")


def layer_flops(spec):
    """``H * W * (C_in * k^2 + 1) * C_out``; the +1 is the bias."""
    return spec.H_out * spec.W_out * (spec.C_in * spec.k * spec.k + 1) * spec.C_out


def dynamic_layer_flops(spec, b_in, b_out):
    """FLOPs when only the active input and output channels are computed.

    ``b_in``/``b_out`` are bit vectors of length C_in/C_out, or ``[N, C]``
    arrays for a batch (returns one count per row).
    """
    b_in = np.asarray(b_in)
    b_out = np.asarray(b_out)
    if b_in.shape[-1] != spec.C_in or b_out.shape[-1] != spec.C_out:
        raise DimensionError(
            f"layer {spec.layer_id}: decision lengths ({b_in.shape[-1]}, {b_out.shape[-1]}) "
            f"!= channels ({spec.C_in}, {spec.C_out})"
        )
    n_in = np.count_nonzero(b_in, axis=-1).astype(np.int64)
    n_out = np.count_nonzero(b_out, axis=-1).astype(np.int64)
    out = spec.H_out * spec.W_out * (n_in * spec.k * spec.k + 1) * n_out
    return int(out) if np.ndim(out) == 0 else out


def total_flops(specs):
    return sum(layer_flops(s) for s in specs)


def _active(decisions, layer_ids):
    mask = None
    for lid in layer_ids:
        d = np.asarray(decisions[lid], dtype=bool)
        mask = d.copy() if mask is None else (mask | d)
    return mask


def sample_flops(specs, decisions):
    """Per-sample dynamic FLOPs of the whole network.

    ``decisions`` maps each gated layer id to a bool array ``[N, C_out]``.
    """
    gated = [s for s in specs if s.gated]
    if not gated:
        raise UsageError("sample_flops: network has no gated layers")
    missing = [s.layer_id for s in gated if s.layer_id not in decisions]
    if missing:
        raise DimensionError(f"sample_flops: no decisions for gated layers {missing}")
    n = np.asarray(decisions[gated[0].layer_id]).shape[0]
    if n == 0:
        raise UsageError("sample_flops: empty batch")
    total = np.zeros(n, dtype=np.int64)
    for spec in specs:
        if spec.input_from:
            b_in = _active(decisions, spec.input_from)
        else:
            b_in = np.ones((n, spec.C_in), dtype=bool)
        b_out = np.asarray(decisions[spec.layer_id], dtype=bool) if spec.gated else np.ones((n, spec.C_out), dtype=bool)
        if b_out.shape[0] != n:
            raise DimensionError(f"layer {spec.layer_id}: decisions cover {b_out.shape[0]} samples, expected {n}")
        total += dynamic_layer_flops(spec, b_in, b_out)
    return total


@dataclass
class BudgetConfig:
    p: float
    p0: float
    lambda0: float = DEFAULT_LAMBDA0
    estimator_window: int = 20
    n_filters: int = 1
    n_layers: int = 1

    def __post_init__(self):
        if self.p0 <= 0:
            raise ConfigError("budget: p0 must be > 0")
        if not 0 < self.p <= self.p0:
            raise ConfigError(f"budget out of range: p={self.p} must lie in (0, p0={self.p0}]")
        if self.lambda0 <= 0:
            raise ConfigError("budget: lambda0 must be > 0")
        if self.estimator_window < 1:
            raise ConfigError("budget: estimator_window must be >= 1")
        if self.n_filters <= 0:
            raise ConfigError("budget: N_c must be > 0")

    @classmethod
    def from_fraction(cls, fraction, p0, **kw):
        if not 0 < fraction <= 1:
            raise ConfigError(f"budget out of range: budget_fraction={fraction} must lie in (0, 1]")
        return cls(p=fraction * p0, p0=p0, **kw)


@dataclass
class CostEstimator:
    """Moving average of the last ``window`` per-batch mean costs."""

    p0: float
    window: int = 20
    history: deque = field(default=None)
    p_t: float = None

    def __post_init__(self):
        if self.history is None:
            self.history = deque(maxlen=self.window)
        if self.p_t is None:
            self.p_t = float(self.p0)

    def push(self, batch_cost):
        self.history.append(float(batch_cost))
        self.p_t = float(np.mean(self.history))
        if not 0 <= self.p_t <= self.p0 * (1 + 1e-12):
            raise InvariantError(f"estimated cost {self.p_t} outside [0, p0={self.p0}]")
        return self.p_t

    def update(self, per_sample):
        per_sample = np.asarray(per_sample)
        if per_sample.size == 0:
            raise UsageError("cost estimator: empty batch")
        return self.push(per_sample.mean())

    def state_arrays(self):
        return {"estimator/history": np.array(self.history, dtype=np.float64), "estimator/p_t": np.array([self.p_t])}

    def load_state_arrays(self, arrays):
        if "estimator/history" in arrays:
            self.history = deque(arrays["estimator/history"].tolist(), maxlen=self.window)
        if "estimator/p_t" in arrays:
            self.p_t = float(arrays["estimator/p_t"][0])


def estimate_current_cost(estimator, specs, decisions):
    """Push the batch-mean dynamic FLOPs into ``estimator`` and return p_t."""
    return estimator.update(sample_flops(specs, decisions))


def compute_lambda(cfg, p_t):
    """``lambda0 * (p_t - p) / p0``, bounded by construction to [-lambda0, lambda0]."""
    if not 0 <= p_t <= cfg.p0:
        raise InvariantError(f"p_t={p_t} outside [0, p0={cfg.p0}]")
    lam = cfg.lambda0 * (p_t - cfg.p) / cfg.p0
    if abs(lam) > cfg.lambda0:
        raise InvariantError(f"lambda={lam} outside [-{cfg.lambda0}, {cfg.lambda0}]")
    return lam


def cost_term(saliencies, n_filters):
    """``(1/N_c) * sum_l ||s^l||_1`` averaged over the batch.

    Each saliency is ``[N, C_l]``; returns a scalar Tensor.
    """
    if n_filters <= 0:
        raise ConfigError("cost term: N_c must be > 0")
    total = None
    for s in saliencies:
        term = ops.l1_norm(s)
        total = term if total is None else ops.add(total, term)
    n = saliencies[0].shape[0]
    return ops.mul(total, 1.0 / (n_filters * n))


def multi_task_loss(cls_loss, saliencies, lam, n_filters, return_term=False):
    """Classification loss plus ``lam`` times the saliency L1 cost.

    ``lam`` is a plain float; no gradient flows into it. With ``return_term``
    the unweighted cost term value is returned alongside the loss.
    """
    if n_filters <= 0:
        raise ConfigError("multi_task_loss: N_c must be > 0")
    if not saliencies:
        return (cls_loss, 0.0) if return_term else cls_loss
    ct = cost_term(saliencies, n_filters)
    loss = cls_loss if lam == 0 else ops.add(cls_loss, ops.mul(ct, lam))
    return (loss, float(ct.data)) if return_term else loss
