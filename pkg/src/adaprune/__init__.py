"""Self-adaptive channel pruning on a small numpy autodiff engine."""
from .autodiff import Parameter, Tensor, backward, no_grad
from .backbones import NetworkConfig, LayerSpec, build_network, extract_cost_specs, preset
from .config import TrainConfig, load_config
from .cost import (
    BudgetConfig,
    CostEstimator,
    LayerCostSpec,
    compute_lambda,
    dynamic_layer_flops,
    layer_flops,
    multi_task_loss,
)
from .errors import AdaPruneError
from .kernels import backend, get_backend, set_backend
from .spm import SPM, BinarizerConfig, Variant, gated_conv_layer

__version__ = "0.1.0"

__all__ = [
    "AdaPruneError",
    "BinarizerConfig",
    "BudgetConfig",
    "CostEstimator",
    "LayerCostSpec",
    "LayerSpec",
    "NetworkConfig",
    "Parameter",
    "SPM",
    "Tensor",
    "TrainConfig",
    "Variant",
    "backend",
    "backward",
    "build_network",
    "compute_lambda",
    "dynamic_layer_flops",
    "extract_cost_specs",
    "gated_conv_layer",
    "get_backend",
    "layer_flops",
    "load_config",
    "multi_task_loss",
    "no_grad",
    "preset",
    "set_backend",
]
