"""Few-shot segmentation by similarity propagation, desk scale.

A minimal float32 tensor library with reverse-mode autodiff, the dual
prediction / attentive fusion segmentation network built on it, synthetic
episodic data, training, and an evaluation plus premise-validation suite,
all behind one CLI (`simprop`).
"""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad
from .model import ModelConfig, ModelParams, forward_dual, predict

__all__ = [
    "Tensor",
    "no_grad",
    "ModelConfig",
    "ModelParams",
    "forward_dual",
    "predict",
    "__version__",
]
