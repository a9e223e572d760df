"""Unpaired photo-to-line-drawing translation with geometry and semantic objectives."""

from .losses import LossBundle, LossWeights, total_objective
from .networks import (
    DepthDecoderConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    build_depth_decoder,
    build_discriminator,
    build_generator,
    depth_from_drawing,
)

__version__ = "0.1.0"
