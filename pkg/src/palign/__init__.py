"""Prompt learning with candidate labels on a synthetic frozen dual encoder."""

from .alignment import AlignConfig, align_loss, alpha_schedule, mix_posteriors, restrict_posterior, total_loss
from .encoder_sim import World, WorldConfig, class_posterior, make_world, sample_dataset
from .trainer import TrainConfig, linear_probe_run, train_run

__version__ = "0.1.0"
