"""qaxial: quaternion-enhanced axial-attention residual networks.

A small deep-learning framework (numpy tensors with reverse-mode autodiff)
plus a model zoo of four bottleneck-residual image classifiers: a plain
convolutional ResNet, a quaternion-convolution ResNet, an axial-attention
ResNet, and the axial variant with a grouped 1x1 quaternion bank in front of
each attention pair.
"""

from . import autodiff, axial, data, errors, nn, quaternion, recon, training, zoo
from .autodiff import Tensor, backward, grad_check, no_grad
from .axial import AxialAttention1D, AxialPairModule, axial_flop_count
from .data import Dataset, load_cifar10_binary, synthetic_classification_dataset
from .quaternion import (
    Quaternion,
    QuaternionBank1x1,
    QuaternionConv2d,
    hamilton_matrix,
    hamilton_product,
)
from .training import TrainConfig, TrainHistory, evaluate, lr_schedule, train
from .zoo import ArchitectureSpec, build, count_layers, count_params, spec_for

__all__ = [
    "ArchitectureSpec",
    "AxialAttention1D",
    "AxialPairModule",
    "Dataset",
    "Quaternion",
    "QuaternionBank1x1",
    "QuaternionConv2d",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "autodiff",
    "axial",
    "axial_flop_count",
    "backward",
    "build",
    "count_layers",
    "count_params",
    "data",
    "errors",
    "evaluate",
    "grad_check",
    "hamilton_matrix",
    "hamilton_product",
    "load_cifar10_binary",
    "lr_schedule",
    "nn",
    "no_grad",
    "quaternion",
    "recon",
    "spec_for",
    "synthetic_classification_dataset",
    "train",
    "training",
    "zoo",
]

__version__ = "0.1.0"
