"""Spiking ResNode networks on random DAGs, with path-restricted continual learning."""

from .errors import (CapacityError, CogniSNNError, ConfigError, DimensionError, FormatError,
                     InvalidArgumentError, NumericError)
from .net import CogniSNN, ModelConfig, forward, spike_statistics
from .neuron import NeuronConfig
from .topology import DagTopology, generate_er, generate_ws, rank_paths, select_critical_paths

__all__ = [
    "CapacityError", "CogniSNN", "CogniSNNError", "ConfigError", "DagTopology", "DimensionError",
    "FormatError", "InvalidArgumentError", "ModelConfig", "NeuronConfig", "NumericError", "forward",
    "generate_er", "generate_ws", "rank_paths", "select_critical_paths", "spike_statistics",
]
