"""Color/shape disentangled prototypical-parts classifier."""

from .data import ImageSample, SyntheticSpec, generate_synthetic, hue_perturb, to_grayscale
from .losses import LossWeights, total_loss
from .model import LucidPPN, fuse, top_classes
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
