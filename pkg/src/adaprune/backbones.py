"""Declarative network construction and conv cost-spec extraction."""
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .cost import LayerCostSpec, layer_flops
from .errors import ConfigError
from .kernels import conv_output_size
from .layers import ConvBN, Linear, Module
from .spm import SPM, BinarizerConfig, Variant

LAYER_KINDS = ("conv", "block", "pool", "gap", "flatten", "linear")


@dataclass
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = None
    gated: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.padding is None:
            self.padding = self.kernel // 2 if self.kind in ("conv", "block") else 0


@dataclass
class NetworkConfig:
    name: str
    input_shape: tuple
    layers: list
    num_classes: int
    reduction_rate: int = 16

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]


# ------------------------------------------------------------------- presets


def tinynet(num_classes=10, input_shape=(3, 32, 32)):
    return NetworkConfig(
        "tinynet",
        input_shape,
        [
            LayerSpec("conv", 8, 3, 1),
            LayerSpec("conv", 16, 3, 2),
            LayerSpec("conv", 32, 3, 1),
            LayerSpec("gap"),
            LayerSpec("linear", num_classes),
        ],
        num_classes,
        reduction_rate=4,
    )


def _w(c, width):
    return max(1, int(round(c * width)))


def mcifarnet_like(num_classes=10, width=1.0, input_shape=(3, 32, 32)):
    """Seven-conv plain CNN; about 174.4M FLOPs at full width on 32x32 input."""
    plan = [(64, 1), (64, 1), (128, 2), (128, 1), (128, 1), (208, 2), (208, 1)]
    layers = [LayerSpec("conv", _w(c, width), 3, s) for c, s in plan]
    layers += [LayerSpec("gap"), LayerSpec("linear", num_classes)]
    return NetworkConfig("mcifarnet", input_shape, layers, num_classes)


VGG19_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


def vgg_like(num_classes=10, width=1.0, input_shape=(3, 32, 32)):
    """VGG-19 with BN, CIFAR layout (single classifier layer)."""
    layers = [LayerSpec("pool", kernel=2) if v == "M" else LayerSpec("conv", _w(v, width), 3, 1) for v in VGG19_PLAN]
    layers += [LayerSpec("flatten"), LayerSpec("linear", num_classes)]
    return NetworkConfig("vgg", input_shape, layers, num_classes)


def resnet18_like(num_classes=10, width=1.0, input_shape=(3, 32, 32)):
    """ResNet-18, CIFAR stem (3x3 conv, no max pool)."""
    layers = [LayerSpec("conv", _w(64, width), 3, 1)]
    for c, s in [(64, 1), (128, 2), (256, 2), (512, 2)]:
        layers += [LayerSpec("block", _w(c, width), 3, s), LayerSpec("block", _w(c, width), 3, 1)]
    layers += [LayerSpec("gap"), LayerSpec("linear", num_classes)]
    return NetworkConfig("resnet18", input_shape, layers, num_classes)


PRESETS = {
    "tinynet": tinynet,
    "mcifarnet": mcifarnet_like,
    "vgg": vgg_like,
    "resnet18": resnet18_like,
}


def preset(name, num_classes=10, width=1.0, input_shape=(3, 32, 32)):
    if name not in PRESETS:
        raise ConfigError(f"unknown backbone {name!r}; expected one of {sorted(PRESETS)}")
    if name == "tinynet":
        return tinynet(num_classes, input_shape)
    return PRESETS[name](num_classes, width, input_shape)


# ------------------------------------------------------------------ planning


@dataclass
class _ConvPlan:
    layer_id: int
    c_in: int
    c_out: int
    k: int
    stride: int
    padding: int
    h_out: int
    w_out: int
    gated: bool
    input_from: tuple


@dataclass
class _StepPlan:
    index: int
    spec: LayerSpec
    convs: list = field(default_factory=list)
    features: int = 0


def _plan(cfg, gate=True, input_shape=None):
    """Propagate shapes through ``cfg``; one entry per layer spec."""
    c, h, w = input_shape or cfg.input_shape
    flat = None
    src = None  # gated layers whose union of active channels is the current feature map's
    next_id = 0
    steps = []

    def conv(i, c_in, h_in, w_in, c_out, k, stride, padding, gated, input_from):
        nonlocal next_id
        if k > h_in + 2 * padding or k > w_in + 2 * padding:
            raise ConfigError(f"layer {i}: kernel {k} does not fit input {h_in}x{w_in} with padding {padding}")
        if stride < 1 or c_out < 1:
            raise ConfigError(f"layer {i}: stride and channels must be >= 1")
        p = _ConvPlan(
            next_id,
            c_in,
            c_out,
            k,
            stride,
            padding,
            conv_output_size(h_in, k, stride, padding),
            conv_output_size(w_in, k, stride, padding),
            gated,
            input_from,
        )
        next_id += 1
        return p

    for i, spec in enumerate(cfg.layers):
        step = _StepPlan(i, spec)
        if flat is not None and spec.kind != "linear":
            raise ConfigError(f"layer {i}: {spec.kind!r} cannot follow a flattened feature vector")
        if spec.kind == "conv":
            g = gate and spec.gated
            p = conv(i, c, h, w, spec.channels, spec.kernel, spec.stride, spec.padding, g, src)
            step.convs.append(p)
            c, h, w = p.c_out, p.h_out, p.w_out
            src = (p.layer_id,) if g else None
        elif spec.kind == "block":
            g = gate and spec.gated
            p1 = conv(i, c, h, w, spec.channels, spec.kernel, spec.stride, spec.padding, g, src)
            p2 = conv(i, p1.c_out, p1.h_out, p1.w_out, spec.channels, spec.kernel, 1, spec.padding, g, (p1.layer_id,) if g else None)
            step.convs += [p1, p2]
            if spec.stride != 1 or c != spec.channels:
                sc = conv(i, c, h, w, spec.channels, 1, spec.stride, 0, False, src)
                if (sc.h_out, sc.w_out) != (p2.h_out, p2.w_out):
                    raise ConfigError(f"layer {i}: shortcut shape does not match block output")
                step.convs.append(sc)
                src = None
            elif src is not None and g:
                src = tuple(sorted(set(src) | {p2.layer_id}))
            else:
                src = None
            c, h, w = p2.c_out, p2.h_out, p2.w_out
        elif spec.kind == "pool":
            if spec.kernel > h or spec.kernel > w:
                raise ConfigError(f"layer {i}: pool window {spec.kernel} larger than input {h}x{w}")
            h, w = h // spec.kernel, w // spec.kernel
        elif spec.kind == "gap":
            flat = c
        elif spec.kind == "flatten":
            flat = c * h * w
        elif spec.kind == "linear":
            if flat is None:
                raise ConfigError(f"layer {i}: linear needs a gap or flatten layer before it")
            step.features = flat
            flat = spec.channels
        steps.append(step)
    if cfg.layers and cfg.layers[-1].kind != "linear":
        raise ConfigError("network must end in a linear layer")
    if flat != cfg.num_classes:
        raise ConfigError(f"final linear outputs {flat}, expected num_classes={cfg.num_classes}")
    return steps


# ------------------------------------------------------------------- modules


class ConvUnit(Module):
    def __init__(self, conv):
        super().__init__()
        self.conv = conv

    def __call__(self, x):
        return ops.relu(self.conv(x))


class BasicBlock(Module):
    def __init__(self, conv1, conv2, shortcut=None):
        super().__init__()
        self.conv1 = conv1
        self.conv2 = conv2
        self.shortcut = shortcut

    def __call__(self, x):
        h = self.conv2(ops.relu(self.conv1(x)))
        sc = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(h, sc))


class _Fn(Module):
    def __init__(self, kind, k=2):
        super().__init__()
        self.kind = kind
        self.k = k

    def __call__(self, x):
        if self.kind == "pool":
            return ops.max_pool2d(x, self.k)
        if self.kind == "gap":
            return ops.global_avg_pool(x)
        return ops.flatten(x)


class Network(Module):
    def __init__(self, cfg, variant, units, convs):
        super().__init__()
        self.cfg = cfg
        self.variant = variant
        self.units = units
        self._convs = convs

    def __call__(self, x):
        for unit in self.units:
            x = unit(x)
        return x

    @property
    def conv_layers(self):
        return list(self._convs)

    @property
    def spms(self):
        return [c.spm for c in self._convs if c.spm is not None]

    @property
    def n_filters(self):
        """Total output channels over gated conv layers (N_c)."""
        spms = self.spms
        if spms:
            return sum(s.head.c_out for s in spms)
        return sum(c.c_out for c in self._convs)

    def saliencies(self):
        return [s.last_s for s in self.spms]

    def decisions(self, clean=False):
        """Latest binary code per gated layer; ``clean`` selects the noise-free one."""
        return {s.layer_id: (s.last_clean if clean else s.last_hard) for s in self.spms}

    def set_decision_sink(self, sink):
        for s in self.spms:
            s.sink = sink

    def force_gates(self, s_value=1.0, b_value=1.0):
        for s in self.spms:
            s.forced = None if s_value is None else (s_value, b_value)

    def backbone_parameters(self):
        return [p for name, p in self.named_parameters() if ".spm." not in name]

    def spm_parameters(self):
        return [p for name, p in self.named_parameters() if ".spm." in name]

    def head_flops(self):
        return sum(s.head.flops() for s in self.spms)


def build_network(cfg, variant=Variant.SANP, binarizer=None, k_fraction=0.5, seed=0, head_bias=True):
    """Instantiate ``cfg``. Backbone weights depend only on ``seed``, never on
    the variant, so gated and dense twins start from identical weights."""
    variant = Variant.parse(variant)
    gate = variant is not Variant.UNPRUNED
    steps = _plan(cfg, gate)
    wrng = np.random.default_rng(seed)
    srng = np.random.default_rng(seed + 1_000_003)
    binarizer = binarizer or BinarizerConfig(rng_seed=seed)
    units, convs = [], []

    def make_conv(p):
        m = ConvBN(p.c_in, p.c_out, p.k, p.stride, p.padding, rng=wrng, layer_id=p.layer_id)
        if p.gated:
            m.spm = SPM(
                p.c_in,
                p.c_out,
                p.layer_id,
                variant,
                binarizer,
                cfg.reduction_rate,
                k_fraction,
                rng=srng,
                head_bias=head_bias,
            )
        convs.append(m)
        return m

    for step in steps:
        kind = step.spec.kind
        if kind == "conv":
            units.append(ConvUnit(make_conv(step.convs[0])))
        elif kind == "block":
            c1, c2 = make_conv(step.convs[0]), make_conv(step.convs[1])
            sc = make_conv(step.convs[2]) if len(step.convs) > 2 else None
            units.append(BasicBlock(c1, c2, sc))
        elif kind == "linear":
            units.append(Linear(step.features, step.spec.channels, rng=wrng))
        else:
            units.append(_Fn(kind, step.spec.kernel))
    net = Network(cfg, variant, units, convs)
    net.assign_names()
    return net


def extract_cost_specs(net_or_cfg, input_shape=None, gated=None):
    """One LayerCostSpec per conv layer, plus p0 (dense FLOPs of all convs)."""
    if isinstance(net_or_cfg, Network):
        cfg = net_or_cfg.cfg
        gate = net_or_cfg.variant is not Variant.UNPRUNED if gated is None else gated
    else:
        cfg = net_or_cfg
        gate = True if gated is None else gated
    specs = []
    for step in _plan(cfg, gate, input_shape):
        for p in step.convs:
            specs.append(LayerCostSpec(p.layer_id, p.h_out, p.w_out, p.c_in, p.c_out, p.k, p.gated, p.input_from))
    return specs, sum(layer_flops(s) for s in specs)


def with_input(cfg, input_shape):
    return replace(cfg, input_shape=tuple(input_shape))
