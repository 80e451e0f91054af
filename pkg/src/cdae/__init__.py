"""Convolutional denoising autoencoder features for expression images.

Train an encoder-decoder to reconstruct grayscale images from masked
inputs, flatten the bottleneck activations into per-gene feature
vectors, and score gene-category membership with nested cross-validated
logistic regression. See the `cdae` command-line tool for the end-to-end
pipeline.
"""

__version__ = "0.1.0"

from .network import ArchitectureSpec, Model, load_model, load_preset, parse_spec, save_model
from .training import TrainConfig, train

__all__ = [
    "__version__",
    "ArchitectureSpec",
    "Model",
    "TrainConfig",
    "load_model",
    "load_preset",
    "parse_spec",
    "save_model",
    "train",
]
