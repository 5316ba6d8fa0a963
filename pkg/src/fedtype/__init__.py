"""Heterogeneous federated learning through small shared proxy models."""

from ._kernels import BACKEND
from .conformal import ConformalConfig, ConformalModel, PredictionSet
from .data import Dataset, dirichlet_partition, load_idx, split_721, synth_gaussian
from .federation import (
    ClientState,
    FederationConfig,
    RoundMetrics,
    Server,
    aggregate,
    comm_ratio,
    evaluate,
    run_federation,
    run_round,
    sample_clients,
    setup_federation,
)
from .nn import AdamState, DenseNet, flatten, forward_logits, init_network, unflatten
from .reciprocity import EpochStats, UarlConfig, consensus_weight, topk_set, uarl_local_train

__version__ = "0.1.0"
