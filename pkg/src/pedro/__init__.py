"""Prompt-dependent representation modification (PEDRO) at desk scale."""

from .model import ModelConfig, Transformer
from .pedro import PedroAdapter, count_trainable_params
from .rational import RationalActivation

__all__ = ["ModelConfig", "Transformer", "PedroAdapter", "RationalActivation", "count_trainable_params"]
__version__ = "0.1.0"
