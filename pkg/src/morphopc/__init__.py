"""Learned mask optimization with morphological encoder-decoder networks.

A small reverse-mode autodiff engine drives learnable grayscale morphology,
a MultiScaleMorph generator, a differentiable lithography simulator and the
OPC metric suite. See ``morphopc --help`` for the command-line surface.
"""

from .estimator import MorphOPC, PixelILT
from .litho import LithoModel
from .metrics import EpeConfig, MetricsRecord, evaluate
from .network import Discriminator, Generator, GeneratorConfig
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "MorphOPC",
    "PixelILT",
    "LithoModel",
    "EpeConfig",
    "MetricsRecord",
    "evaluate",
    "Generator",
    "GeneratorConfig",
    "Discriminator",
    "Tensor",
    "Parameter",
    "backward",
    "no_grad",
]
