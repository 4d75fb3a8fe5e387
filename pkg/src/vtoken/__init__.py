"""Toy vision-language model trained with visual tokens: distributions over the
text vocabulary that supervise image positions alongside ordinary next-token text loss."""

from .model import ModelConfig, VisionLanguageModel
from .tensor import Tensor, no_grad, float_width

__version__ = "0.1.0"
__all__ = ["ModelConfig", "VisionLanguageModel", "Tensor", "no_grad", "float_width"]
