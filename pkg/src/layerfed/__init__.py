"""Layered multi-task federated learning on dense networks.

Layers of one network are grouped into a frozen pretrained prefix, layers
shared by all clients, layers shared within a task group and layers private to
each client; a simulated server trains them with per-group aggregation.
"""

from .errors import (AggregationError, AssemblyError, ConfigError, ConfigurationError,
                     DivergedClientError, EvaluationError, IngestionError, LayerFedError,
                     ParseError, PartitionError, ShapeError)
from .nn import DenseLayer, LayerGrad, LayerSpec, LossKind
from .partition import GroupedGradients, LayerGroup, PartitionedModel
from .federation import (AggregationRule, ClientState, FederationHyperparams, MetricsLog,
                         ServerState)
from .data import Shard, SyntheticConfig, TabularDataset
from .config import ExperimentConfig, ScenarioKind, parse_config

__all__ = [
    "AggregationError", "AggregationRule", "AssemblyError", "ClientState", "ConfigError",
    "ConfigurationError", "DenseLayer", "DivergedClientError", "EvaluationError",
    "ExperimentConfig", "FederationHyperparams", "GroupedGradients", "IngestionError",
    "LayerFedError", "LayerGrad", "LayerGroup", "LayerSpec", "LossKind", "MetricsLog",
    "ParseError", "PartitionError", "PartitionedModel", "ScenarioKind", "ServerState", "Shard",
    "ShapeError", "SyntheticConfig", "TabularDataset", "parse_config",
]

__version__ = "0.1.0"
