"""Gray-to-color reconstruction comparison.

Trains two small convolutional autoencoders with matched trainable-parameter
budgets on the same luminance inputs and color targets: one quaternion-valued
(grayscale replicated into the three imaginary channels of a zero-real-part
quaternion input) and one real-valued.  Held-out color MSE of each is
returned; the quaternion network's weight sharing buys it twice the feature
channels at the same parameter count.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .nn import Conv2d, Module, ReLU
from .quaternion import QuaternionConv2d
from .training import SGDMomentum

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def to_grayscale(images: np.ndarray) -> np.ndarray:
    """[N,3,H,W] color -> [N,1,H,W] luminance."""
    return np.einsum("nchw,c->nhw", images, LUMA_WEIGHTS)[:, None]


class QuaternionColorizer(Module):
    """Quaternion conv stack; output quaternions' (i,j,k) are the RGB guess."""

    def __init__(self, width_quats: int, rng):
        super().__init__()
        c = 4 * width_quats
        self.conv_in = QuaternionConv2d(4, c, 3, padding=1, rng=rng)
        self.conv_mid = QuaternionConv2d(c, c, 3, padding=1, rng=rng)
        self.conv_out = QuaternionConv2d(c, 4, 3, padding=1, rng=rng)
        self.relu = ReLU()
        for comp in self.conv_out.components():  # start the head near zero
            comp.data *= 0.1

    def forward(self, gray):
        n, _, h, w = gray.shape
        zeros = Tensor(np.zeros((n, 1, h, w), dtype=gray.dtype))
        x = ad.concat([zeros, gray, gray, gray], axis=1)
        x = self.relu(self.conv_in(x))
        x = self.relu(self.conv_mid(x))
        return ad.narrow(self.conv_out(x), 1, 1, 3)


class RealColorizer(Module):
    def __init__(self, width: int, rng):
        super().__init__()
        self.conv_in = Conv2d(1, width, 3, padding=1, rng=rng)
        self.conv_mid = Conv2d(width, width, 3, padding=1, rng=rng)
        self.conv_out = Conv2d(width, 3, 3, padding=1, rng=rng)
        self.relu = ReLU()
        self.conv_out.weight.data *= 0.1

    def forward(self, gray):
        x = self.relu(self.conv_in(gray))
        x = self.relu(self.conv_mid(x))
        return self.conv_out(x)


def _mse(model, gray, targets, batch_size=64):
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(gray), batch_size):
            pred = model(Tensor(gray[start:start + batch_size])).data
            diff = pred - targets[start:start + batch_size]
            total += float((diff * diff).sum())
    return total / targets.size


def _fit(model, gray, targets, epochs, lr, seed):
    opt = SGDMomentum(model.named_parameters(), momentum=0.9, weight_decay=0.0)
    n = len(gray)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, 16):
            idx = order[start:start + 16]
            pred = model(Tensor(gray[idx]))
            diff = pred - Tensor(targets[idx])
            loss = (diff * diff).mean()
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr)
    return model


def color_reconstruction_experiment(dataset, epochs: int = 6, seed: int = 0,
                                    width_quats: int = 8, real_width: int | None = None,
                                    lr: float = 0.05, holdout_fraction: float = 0.2):
    """Train matched quaternion and real colorizers; return their held-out MSEs.

    ``real_width`` defaults to 2*width_quats, which matches the two parameter
    budgets exactly; any configuration off by more than 5% is rejected.
    Inputs and color targets are centered by training-split channel means, so
    an untrained (near-zero output) model scores roughly the target variance.
    """
    if real_width is None:
        real_width = 2 * width_quats
    images = np.asarray(dataset.images, dtype=np.float32)
    if len(images) < 10:
        raise ConfigurationError("need at least 10 color images")
    n_test = max(1, int(len(images) * holdout_fraction))
    train_imgs, test_imgs = images[:-n_test], images[-n_test:]

    gray_train = to_grayscale(train_imgs)
    gray_test = to_grayscale(test_imgs)
    gray_mean = gray_train.mean()
    color_mean = train_imgs.mean(axis=(0, 2, 3), keepdims=True)
    gray_train = gray_train - gray_mean
    gray_test = gray_test - gray_mean
    target_train = train_imgs - color_mean
    target_test = test_imgs - color_mean

    quat = QuaternionColorizer(width_quats, np.random.default_rng([seed, 101]))
    real = RealColorizer(real_width, np.random.default_rng([seed, 202]))
    q_params, r_params = quat.param_count(), real.param_count()
    if abs(q_params - r_params) > 0.05 * max(q_params, r_params):
        raise ConfigurationError(
            f"parameter budgets differ by more than 5%: {q_params} vs {r_params}")

    _fit(quat, gray_train, target_train, epochs, lr, seed)
    _fit(real, gray_train, target_train, epochs, lr, seed)
    return _mse(quat, gray_test, target_test), _mse(real, gray_test, target_test)


def initial_mse_ratio(dataset, seed: int = 0, width_quats: int = 8):
    """(quat, real) untrained held-out MSE divided by target variance."""
    images = np.asarray(dataset.images, dtype=np.float32)
    n_test = max(1, int(len(images) * 0.2))
    train_imgs, test_imgs = images[:-n_test], images[-n_test:]
    color_mean = train_imgs.mean(axis=(0, 2, 3), keepdims=True)
    gray_mean = to_grayscale(train_imgs).mean()
    gray_test = to_grayscale(test_imgs) - gray_mean
    target_test = test_imgs - color_mean
    variance = float((target_test ** 2).mean())
    quat = QuaternionColorizer(width_quats, np.random.default_rng([seed, 101]))
    real = RealColorizer(2 * width_quats, np.random.default_rng([seed, 202]))
    return (_mse(quat, gray_test, target_test) / variance,
            _mse(real, gray_test, target_test) / variance)
