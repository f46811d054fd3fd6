"""Nested U-shaped segmentation network with dual-domain skip-feature disentanglement."""

from .biaf import BIAF
from .ddfd import DDFD
from .errors import CheckpointError, ConfigError, DivergenceError, PairingError, ValidationError
from .losses import LossHyperParams, total_loss
from .network import DBIFAUNet, NetworkConfig, build
from .trainer import TrainConfig, evaluate, lr_schedule, predict, train

__version__ = "0.1.0"
