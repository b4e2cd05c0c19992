"""Multi-domain, style-conditioned image-to-image translation.

A single generator/discriminator pair plus a latent-code style extractor,
trained with a WGAN-GP objective, auxiliary domain classification, and
cycle-consistency reconstruction.
"""

from .config import TrainConfig, parse_config
from .data_pipeline import DatasetSpec, ImageBatch, SyntheticDomainConfig, load_dataset
from .losses import LossReport, LossWeights
from .models import Discriminator, Generator, StyleExtractor
from .trainer import CheckpointState, train, translate

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "parse_config",
    "DatasetSpec",
    "ImageBatch",
    "SyntheticDomainConfig",
    "load_dataset",
    "LossReport",
    "LossWeights",
    "Generator",
    "StyleExtractor",
    "Discriminator",
    "CheckpointState",
    "train",
    "translate",
    "__version__",
]
