"""Bi-layer one-shot head avatars: pose-dependent coarse synthesis plus a
warped pose-independent texture, trained across identities so a single
source frame personalizes the model."""

__version__ = "0.1.0"

from .config import LossWeights, ModelConfig, TrainConfig  # noqa: F401
