"""Efficient elastic diffusion transformers on a numpy substrate.

Submodules: ``numerics`` (tensors, tape autodiff, seeded randomness),
``attention`` (dense, compressed-global and blockwise-neighborhood attention),
``model`` (three-stage DiT), ``elastic`` (width slicing and joint training),
``losses``, ``kdmd`` (step distillation), ``oracle`` (Gaussian-mixture ground
truth), ``data_io``, ``bench`` and ``cli``.
"""

from ._kernels import get_backend, set_backend
from .attention import AttentionConfig
from .model import ModelConfig, StageLayout
from .numerics import NumericalError, Rng, ShapeError

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "ModelConfig",
    "StageLayout",
    "Rng",
    "ShapeError",
    "NumericalError",
    "get_backend",
    "set_backend",
    "__version__",
]
