"""Quaternion algebra and quaternion convolution layers.

A quaternion is kept as the 4-tuple (r, i, j, k).  Channel layout convention
throughout the package: channels [4g, 4g+1, 4g+2, 4g+3] of a feature map are
the (r, i, j, k) components of quaternion group ``g``.

The left Hamilton product w * q is a linear map of q whose 4x4 matrix reuses
the four components of w in a fixed sign pattern, so a quaternion convolution
is exactly a real convolution with a structured weight tensor: each
(output-group, input-group) block of the expanded weight holds only four
independent values.  Layers below build that expansion with differentiable
stack/negate ops, which makes each shared component's gradient the sum of the
gradients over its four placements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError
from .nn import Module, Parameter


@dataclass(frozen=True)
class Quaternion:
    r: float
    i: float
    j: float
    k: float

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.i, self.j, self.k], dtype=np.float64)


IDENTITY = Quaternion(1.0, 0.0, 0.0, 0.0)


def hamilton_product(p: Quaternion, q: Quaternion) -> Quaternion:
    return Quaternion(
        p.r * q.r - p.i * q.i - p.j * q.j - p.k * q.k,
        p.r * q.i + p.i * q.r + p.j * q.k - p.k * q.j,
        p.r * q.j - p.i * q.k + p.j * q.r + p.k * q.i,
        p.r * q.k + p.i * q.j - p.j * q.i + p.k * q.r,
    )


def hamilton_matrix(w: Quaternion) -> np.ndarray:
    """4x4 matrix M with M @ vec(q) == vec(w * q)."""
    r, i, j, k = w.r, w.i, w.j, w.k
    return np.array([
        [r, -i, -j, -k],
        [i, r, -k, j],
        [j, k, r, -i],
        [k, -j, i, r],
    ], dtype=np.float64)


# (component index, sign) of entry (a, b) in the expanded 4x4 block,
# components ordered (r, i, j, k); mirrors hamilton_matrix exactly.
_EXPANSION = (
    ((0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)),
    ((1, 1.0), (0, 1.0), (3, -1.0), (2, 1.0)),
    ((2, 1.0), (3, 1.0), (0, 1.0), (1, -1.0)),
    ((3, 1.0), (2, -1.0), (1, 1.0), (0, 1.0)),
)


def _expand_components(components) -> Tensor:
    """Assemble [*dims] component tensors into the structured real weight.

    ``components`` is the (r, i, j, k) tuple of Tensors shaped
    [q_out, q_in, kh, kw]; result is [4*q_out, 4*q_in, kh, kw].
    """
    rows = []
    for row_spec in _EXPANSION:
        blocks = [components[c] if s > 0 else ad.neg(components[c])
                  for c, s in row_spec]
        rows.append(ad.stack(blocks, axis=2))  # [q_out, q_in, 4b, kh, kw]
    expanded = ad.stack(rows, axis=1)          # [q_out, 4a, q_in, 4b, kh, kw]
    q_out, _, q_in, _, kh, kw = expanded.shape
    return ad.reshape(expanded, (4 * q_out, 4 * q_in, kh, kw))


def quaternion_init(q_in: int, q_out: int, kh: int, kw: int,
                    seed: int | np.random.Generator = 0) -> np.ndarray:
    """Draw quaternion kernels as [4, q_out, q_in, kh, kw] real components.

    Each quaternion is magnitude * (cos t, sin t * u) with u a uniform unit
    3-vector, t uniform in [-pi, pi] and the magnitude Rayleigh-distributed,
    scaled so the pooled variance of the expanded real weights equals
    2 / (fan_in + fan_out) with fans counted in real channels.
    """
    if min(q_in, q_out, kh, kw) < 1:
        raise ConfigurationError("quaternion_init needs positive dimensions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = q_out * q_in * kh * kw
    fan_in = 4 * q_in * kh * kw
    fan_out = 4 * q_out * kh * kw
    # pooled variance of expanded entries is E[s^2]/4; Rayleigh has E[s^2]=2*sigma^2
    sigma = math.sqrt(4.0 / (fan_in + fan_out))
    s = rng.rayleigh(scale=sigma, size=n)
    theta = rng.uniform(-math.pi, math.pi, size=n)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    comp = np.empty((4, n), dtype=np.float64)
    comp[0] = s * np.cos(theta)
    comp[1:] = (s * np.sin(theta)) * u.T
    return comp.reshape(4, q_out, q_in, kh, kw)


class QuaternionConv2d(Module):
    """Full quaternion 2-D convolution: q_out x q_in quaternion kernels.

    Input/output channel counts are 4*q_in and 4*q_out; trainable real
    parameter count is exactly 4 * q_out * q_in * kh * kw (no bias).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if in_channels % 4 or out_channels % 4:
            raise ConfigurationError(
                f"quaternion conv needs channel counts divisible by 4, got "
                f"{in_channels}->{out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.q_in = in_channels // 4
        self.q_out = out_channels // 4
        comps = quaternion_init(self.q_in, self.q_out, kernel_size, kernel_size,
                                rng or np.random.default_rng(0)).astype(np.float32)
        self.w_r = Parameter(comps[0])
        self.w_i = Parameter(comps[1])
        self.w_j = Parameter(comps[2])
        self.w_k = Parameter(comps[3])

    def components(self):
        return (self.w_r, self.w_i, self.w_j, self.w_k)

    def expanded_weight(self) -> Tensor:
        return _expand_components(self.components())

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"quaternion conv expects {self.in_channels} channels, got {x.shape[1]}")
        return ad.conv2d(x, self.expanded_weight(), None, self.stride, self.padding)


class QuaternionBank1x1(Module):
    """Block-diagonal bank of 1x1 quaternion convolutions.

    Channels are split into m/4 groups of four; one quaternion weight is
    applied pixel-wise to each group, so groups never mix and the layer
    holds exactly m trainable reals.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        super().__init__()
        if channels % 4:
            raise ConfigurationError(
                f"quaternion bank needs a channel count divisible by 4, got {channels}")
        self.channels = channels
        self.groups = channels // 4
        rng = rng or np.random.default_rng(0)
        # one independent 4->4 module per group, so each draw uses fan 4+4
        comps = np.concatenate(
            [quaternion_init(1, 1, 1, 1, rng).reshape(4, 1) for _ in range(self.groups)],
            axis=1)
        self.w_r = Parameter(comps[0].astype(np.float32))
        self.w_i = Parameter(comps[1].astype(np.float32))
        self.w_j = Parameter(comps[2].astype(np.float32))
        self.w_k = Parameter(comps[3].astype(np.float32))

    def components(self):
        return (self.w_r, self.w_i, self.w_j, self.w_k)

    def group_matrices(self) -> Tensor:
        """Differentiable [groups, 4, 4] stack of Hamilton matrices."""
        comps = self.components()
        rows = []
        for row_spec in _EXPANSION:
            entries = [comps[c] if s > 0 else ad.neg(comps[c]) for c, s in row_spec]
            rows.append(ad.stack(entries, axis=1))  # [G, 4b]
        return ad.stack(rows, axis=1)               # [G, 4a, 4b]

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"bank expects {self.channels} channels, got {c}")
        grouped = ad.reshape(x, (n, self.groups, 4, h * w))
        mixed = ad.matmul(self.group_matrices(), grouped)  # broadcast over batch
        return ad.reshape(mixed, (n, c, h, w))


def expand_to_quaternion_input(rgb: Tensor) -> Tensor:
    """[N,3,H,W] RGB -> [N,4,H,W] with a zero real part and (R,G,B) as (i,j,k)."""
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ShapeError(f"expected [N,3,H,W] input, got {rgb.shape}")
    n, _, h, w = rgb.shape
    zeros = Tensor(np.zeros((n, 1, h, w), dtype=rgb.dtype))
    return ad.concat([zeros, rgb], axis=1)
