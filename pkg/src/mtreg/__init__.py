"""Unsupervised deformable registration with a mean-teacher and uncertainty-weighted regularization."""
from .volume import LabelVolume, Volume, read_mvol, write_mvol
from .warp import jacobian_det, warp_nearest, warp_trilinear, zero_field
from .regnet import ArchConfig, ModelParams, forward, init_params, load_model, save_model
from .trainer import TrainConfig, train
from .evaluation import evaluate_registration

__version__ = "0.1.0"
