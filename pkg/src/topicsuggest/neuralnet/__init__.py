"""Small numpy neural toolkit with manual gradients, Adam and L-BFGS."""

from .encoders import (
    CnnEncoder,
    EmbeddingTable,
    RnnEncoder,
    Vocabulary,
    WindowAggregator,
    aggregate_window,
    batch_ids,
    cnn_encode,
    embed,
    rnn_encode,
)
from .layers import PAD, UNK, softmax, softmax_ce
from .optim import AdamConfig, LbfgsConfig, LbfgsResult, OptimState, adam_step, lbfgs_minimize

__all__ = [
    "AdamConfig",
    "CnnEncoder",
    "EmbeddingTable",
    "LbfgsConfig",
    "LbfgsResult",
    "OptimState",
    "PAD",
    "RnnEncoder",
    "UNK",
    "Vocabulary",
    "WindowAggregator",
    "adam_step",
    "aggregate_window",
    "batch_ids",
    "cnn_encode",
    "embed",
    "lbfgs_minimize",
    "rnn_encode",
    "softmax",
    "softmax_ce",
]
