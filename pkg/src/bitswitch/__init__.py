"""Desk-scale workbench for multi-precision and mixed-precision
quantization-aware training with bit-switchable integer checkpoints."""

from .errors import (CheckpointError, ConfigError, DimensionError,
                     InfeasibleError, NumericalError, StaleCacheError)
from .quant import (BitWidthSet, LayerQuantParams, QuantizedTensor,
                    dequantize_low, double_round_low, quantize_activation,
                    quantize_uniform, quantize_weight_high)
from .nn import Network, QuantContext, conv_net, forward, backward, mlp
from .state import ModelState
from .trainer import MultiPrecTrainer, TrainConfig, alrs_lr, eta_factor
from .sensitivity import SensitivityProfile, hutchinson_trace, profile_network
from .supernet import SupernetConfig, SupernetTrainer, roulette_select
from .search import (SearchProblem, SubNetAssignment, enumerate_solutions,
                     pareto_front, solve)
from .checkpoint import load, store

__all__ = [
    "BitWidthSet", "CheckpointError", "ConfigError", "DimensionError",
    "InfeasibleError", "LayerQuantParams", "ModelState", "MultiPrecTrainer",
    "Network", "NumericalError", "QuantContext", "QuantizedTensor",
    "SearchProblem", "SensitivityProfile", "StaleCacheError",
    "SubNetAssignment", "SupernetConfig", "SupernetTrainer", "TrainConfig",
    "alrs_lr", "backward", "conv_net", "dequantize_low", "double_round_low",
    "enumerate_solutions", "eta_factor", "forward", "hutchinson_trace", "load",
    "mlp", "pareto_front", "profile_network", "quantize_activation",
    "quantize_uniform", "quantize_weight_high", "roulette_select", "solve",
    "store",
]

__version__ = "0.1.0"
