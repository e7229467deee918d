from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ctc import CTCInfeasibleError, ctc_loss
from .layers import ContextWindow, ConvNeXtBlock, Embedding, GatedSkip, LayerNorm, Linear, Module, TransformerLayer
from .tensor import GraphError, NonFiniteError, Tensor, cross_entropy

__all__ = [
    "CTCInfeasibleError",
    "CheckpointError",
    "ContextWindow",
    "ConvNeXtBlock",
    "Embedding",
    "GatedSkip",
    "GraphError",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "Tensor",
    "TransformerLayer",
    "cross_entropy",
    "ctc_loss",
    "load_checkpoint",
    "save_checkpoint",
]
