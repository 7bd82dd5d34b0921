"""Unsupervised deformable image registration with a convolutional regressor,
a B-spline transformer and a bilinear resampler, in numpy."""

from .network import NetConfig, Preset, build, preset_config, register_pair, regress
from .tensorcore import DownsampleKind, ModelParams, Tape, Tensor
from .training import TrainConfig, iterative_baseline, train
from .transformer import ControlGrid, DisplacementField, SplineOrder, grid_to_dvf

__version__ = "0.1.0"
