"""Multimodal masked autoencoder for modulation classification, in numpy.

Subpackages and modules:

- ``numerics``: float32 tensors, reverse-mode autodiff, Adam(W), tensor files
- ``modulation``: baseband synthesis, resampling, AWGN, signal images
- ``constellation``: gray and enhanced constellation rasters, PPM export
- ``model``: the transformer autoencoder, masking, losses, denoising
- ``pipeline``: datasets, pretraining, fine-tuning, evaluation protocols
- ``cli``: the ``denomae`` command
"""

from .model import MODALITIES, DenoMAE, DenoMAEConfig
from .modulation import SCHEME_NAMES, apply_awgn, modulate

__version__ = "0.1.0"

__all__ = ["MODALITIES", "SCHEME_NAMES", "DenoMAE", "DenoMAEConfig", "apply_awgn", "modulate", "__version__"]
