"""Landmark prediction adapted to stylized faces through a TPS face warper."""

from .autodiff import Tensor, grad, grad_check, precision
from .landmarker import ArchConfig, Landmarker, init_random, predict, predict_batch
from .optim import Adam, LossWeights
from .synth import SynthConfig, synth_generate
from .trainer import TrainConfig, TrainData, evaluate_nme, train_alternating, train_joint
from .warpfield import WarpParams, tps_fit, tps_fit_exact, warp_image, warp_points

__version__ = "0.1.0"
