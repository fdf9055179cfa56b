"""Training configuration and its YAML file form."""
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .backbones import NetworkConfig, preset, with_input
from .cost import DEFAULT_LAMBDA0
from .errors import ConfigError, MissingFileError
from .spm import BinarizerConfig, Variant

PHASES = ("pretrain", "warmup", "finetune")


@dataclass
class TrainConfig:
    # model
    backbone: str = "tinynet"
    width: float = 1.0
    num_classes: int = 10
    reduction_rate: int = None
    network: dict = None
    # data
    dataset: str = "synthetic"
    data_dir: str = "data"
    synthetic_n: int = 2000
    synthetic_test_n: int = 600
    synthetic_noise: float = 1.0
    image_size: int = 32
    augment: bool = None
    # pruning
    variant: str = "sanp"
    budget_fraction: float = 0.5
    lambda0: float = DEFAULT_LAMBDA0
    estimator_window: int = 20
    cost_on: str = "s"
    cost_estimate: str = "clean"
    k_fraction: float = None
    binarizer_a: float = 1.2
    binarizer_b: float = 0.1
    noise_std: float = 1.0
    s1_mix_prob: float = 0.5
    per_element_mix: bool = False
    # optimization
    lr: float = 0.1
    lr_step_epochs: int = 100
    lr_gamma: float = 0.1
    warmup_lr: float = None
    finetune_lr: float = None
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    eval_batch_size: int = 500
    epochs_pretrain: int = 1
    epochs_warmup: int = 1
    epochs_finetune: int = 1
    # bookkeeping
    seed: int = 0
    out_dir: str = "runs/default"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.budget_fraction <= 1:
            raise ConfigError(f"budget out of range: budget_fraction={self.budget_fraction} must lie in (0, 1]")
        Variant.parse(self.variant)
        if self.dataset not in ("cifar10", "cifar100", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.cost_on not in ("s", "s1"):
            raise ConfigError(f"cost_on must be 's' or 's1', got {self.cost_on!r}")
        if self.cost_estimate not in ("clean", "noisy"):
            raise ConfigError(f"cost_estimate must be 'clean' or 'noisy', got {self.cost_estimate!r}")
        if self.lambda0 <= 0:
            raise ConfigError("lambda0 must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs batch statistics)")
        for name in ("epochs_pretrain", "epochs_warmup", "epochs_finetune"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.k_fraction is not None and not 0 < self.k_fraction <= 1:
            raise ConfigError("k_fraction must lie in (0, 1]")
        if self.estimator_window < 1:
            raise ConfigError("estimator_window must be >= 1")
        self.network_config()
        BinarizerConfig(self.binarizer_a, self.binarizer_b, self.noise_std, self.s1_mix_prob, self.seed)

    @property
    def variant_enum(self):
        return Variant.parse(self.variant)

    @property
    def do_augment(self):
        return self.dataset != "synthetic" if self.augment is None else self.augment

    def input_shape(self):
        return (3, self.image_size, self.image_size) if self.dataset == "synthetic" else (3, 32, 32)

    def network_config(self):
        if self.network:
            spec = dict(self.network)
            spec.setdefault("name", "custom")
            spec.setdefault("input_shape", self.input_shape())
            spec.setdefault("num_classes", self.num_classes)
            try:
                cfg = NetworkConfig(**spec)
            except TypeError as e:
                raise ConfigError(f"invalid network block: {e}") from None
        else:
            cfg = preset(self.backbone, self.num_classes, self.width, self.input_shape())
            cfg = with_input(cfg, self.input_shape())
        if self.reduction_rate is not None:
            cfg.reduction_rate = self.reduction_rate
        if cfg.num_classes != self.num_classes:
            raise ConfigError(f"network num_classes {cfg.num_classes} != num_classes {self.num_classes}")
        return cfg

    def binarizer(self):
        return BinarizerConfig(
            self.binarizer_a, self.binarizer_b, self.noise_std, self.s1_mix_prob, self.seed, self.per_element_mix
        )

    def phase_lr(self, phase):
        if phase == "warmup" and self.warmup_lr is not None:
            return self.warmup_lr
        if phase == "finetune" and self.finetune_lr is not None:
            return self.finetune_lr
        return self.lr

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig(**d)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    try:
        return TrainConfig(**data)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: cannot parse YAML: {e}") from None
    return config_from_dict(data)


def save_config(cfg, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
