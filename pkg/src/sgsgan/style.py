"""Style modulation: mapping network, noise injection and adaptive instance norm.

The mapping network turns a low-dose volume into a fixed-width style code
``w``. Each modulated layer owns a noise scale vector (one scalar per
channel) and an affine map from ``w`` to per-instance ``(gamma, beta)``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Conv3d, Linear, Module, Parameter

TRAIN, TEST = "train", "test"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, TEST):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")


def normalize_instances(f: Tensor, eps_sigma: float = 1e-5) -> Tensor:
    """(f - mu) / max(sigma, eps_sigma) per (instance, channel)."""
    mu, sigma = ad.channel_stats(f)
    sigma = ad.maximum(sigma, eps_sigma)
    return (f - ad.broadcast_channels(mu, f.ndim)) / ad.broadcast_channels(sigma, f.ndim)


def adain(f: Tensor, gamma: Tensor, beta: Tensor, eps_sigma: float = 1e-5) -> Tensor:
    """Normalise each (instance, channel) of ``f`` then scale by ``gamma`` and shift by ``beta``.

    ``gamma`` and ``beta`` are [N, C]. The divisor is floored at
    ``eps_sigma`` so constant channels map to ``beta`` instead of Inf.
    """
    n, c = f.shape[:2]
    if gamma.shape != (n, c) or beta.shape != (n, c):
        raise ad.ShapeError(f"adain: style factors {gamma.shape}/{beta.shape} vs features [N,C]=({n},{c})")
    normed = normalize_instances(f, eps_sigma)
    return ad.broadcast_channels(gamma, f.ndim) * normed + ad.broadcast_channels(beta, f.ndim)


def inject_noise(f: Tensor, scale: Tensor, mode: str, rng: np.random.Generator | None,
                 sigma_z: float = 0.01) -> Tensor:
    """Add one shared Gaussian field, scaled per channel, to ``f`` in train mode.

    In test mode ``f`` itself is returned, so the operation is the exact
    identity.
    """
    _check_mode(mode)
    if mode == TEST:
        return f
    if rng is None:
        raise ValueError("inject_noise in train mode needs an rng")
    if scale.shape != (f.shape[1],):
        raise ad.ShapeError(f"noise scale {scale.shape} vs {f.shape[1]} channels")
    dtype = np.float32 if f.dtype == np.float32 else np.float64
    z = rng.standard_normal((f.shape[0], 1) + f.shape[2:], dtype=dtype)
    z = Tensor((z * sigma_z).astype(f.dtype, copy=False))
    return f + ad.reshape(scale, (1, -1) + (1,) * (f.ndim - 2)) * z


class NoiseModule(Module):
    def __init__(self, channels: int, sigma_z: float = 0.01):
        # zero start: noise enters only as the scales are learned
        self.scale = Parameter(np.zeros(channels, dtype=np.float32))
        self.sigma_z = sigma_z

    def forward(self, f: Tensor, mode: str, rng) -> Tensor:
        return inject_noise(f, self.scale, mode, rng, self.sigma_z)


class StyleAffine(Module):
    """Layer-specific map ``w -> (gamma, beta)`` with ``A`` of shape [style_dim, 2C]."""

    def __init__(self, style_dim: int, channels: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, 0.01, size=(style_dim, 2 * channels)))
        bias = np.concatenate([np.ones(channels), np.zeros(channels)])
        self.bias = Parameter(bias)
        self.channels = channels

    def forward(self, w: Tensor) -> tuple[Tensor, Tensor]:
        return style_factors(w, self)


def style_factors(w: Tensor, affine: StyleAffine) -> tuple[Tensor, Tensor]:
    if w.ndim != 2 or w.shape[1] != affine.weight.shape[0]:
        raise ConfigError(f"style code width {w.shape} does not match affine {affine.weight.shape}")
    c = affine.channels
    out = ad.linear(w, affine.weight, affine.bias)
    return out[:, :c], out[:, c:]


class MappingNetwork(Module):
    """Four conv blocks and a linear layer mapping a volume to its style code.

    Block ``i`` applies a 2x2x2 stride-1 conv to ``channels[i]`` (padding one
    voxel on the low side of each axis keeps the extent), then a 3x3x3
    stride-2 conv that halves every spatial extent. LeakyReLU follows every
    layer, the linear one included.
    """

    def __init__(self, size: int, rng: np.random.Generator,
                 channels=(16, 32, 64, 128), style_dim: int = 512, slope: float = 0.2,
                 eps_sigma: float = 1e-5):
        if size < 16 or size % 16:
            raise ConfigError(f"mapping network needs a spatial size divisible by 16, got {size}")
        self.size = size
        self.slope = slope
        self.eps_sigma = eps_sigma
        self.expand = []
        self.halve = []
        prev = 1
        for ch in channels:
            self.expand.append(Conv3d(prev, ch, 2, rng, stride=1, padding=((1, 0),) * 3))
            self.halve.append(Conv3d(ch, ch, 3, rng, stride=2, padding=1))
            prev = ch
        final = size // 16
        self.flat_features = prev * final ** 3
        self.fc = Linear(self.flat_features, style_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (self.size,) * 3:
            raise ConfigError(
                f"mapping network built for [N,1,{self.size},{self.size},{self.size}], got {x.shape}"
            )
        h = normalize_instances(x, self.eps_sigma)
        for expand, halve in zip(self.expand, self.halve):
            h = ad.leaky_relu(expand(h), self.slope)
            h = ad.leaky_relu(halve(h), self.slope)
        return ad.leaky_relu(self.fc(ad.flatten(h)), self.slope)


def map_style(x: Tensor, mapping: MappingNetwork) -> Tensor:
    return mapping(x)
