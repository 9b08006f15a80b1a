"""Federated visual prompt tuning on frozen encoders, small and deterministic.

A cross-attention prompt generator rides on a frozen vision transformer and
a text embedding provider; training runs across simulated non-IID clients
with FedAvg aggregation, an optional low-rank (LoRA) payload mode, and
evaluation harnesses for base-to-new and domain-generalization protocols.
"""

from .autodiff import Tensor, backward, finite_difference_check, sgd_momentum_step
from .estimator import FedPromptClassifier

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_difference_check",
    "sgd_momentum_step",
    "FedPromptClassifier",
    "__version__",
]
