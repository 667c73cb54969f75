"""Generator (mapping net + DCITN or Unet synthesis), patch critic, and segmenter."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError
from .nn import Conv3d, Module
from .style import TEST, MappingNetwork, NoiseModule, StyleAffine, adain, normalize_instances


class Modulation(Module):
    """What happens to a backbone conv output before its activation.

    Order: noise injection, then AdaIN with style factors from ``w`` (or
    plain instance norm, or nothing), then LeakyReLU.
    """

    def __init__(self, channels: int, cfg: ModelConfig, rng: np.random.Generator):
        self.noise = NoiseModule(channels, cfg.sigma_z) if cfg.use_noise else None
        self.affine = StyleAffine(cfg.style_dim, channels, rng) if cfg.use_adain else None
        self.instance_norm = (not cfg.use_adain) and cfg.plain_norm == "instance"
        self.eps_sigma = cfg.eps_sigma
        self.slope = cfg.slope

    def forward(self, f: Tensor, w: Tensor | None, mode: str, rng) -> Tensor:
        if self.noise is not None:
            f = self.noise(f, mode, rng)
        if self.affine is not None:
            gamma, beta = self.affine(w)
            f = adain(f, gamma, beta, self.eps_sigma)
        elif self.instance_norm:
            f = normalize_instances(f, self.eps_sigma)
        return ad.leaky_relu(f, self.slope)


class DCITN(Module):
    """Densely connected translation network: stem, dense layers, 1-channel projection.

    Every conv is 3x3x3, stride 1, padding 1. Dense layer ``j`` sees the
    concatenation of the stem output and all earlier dense outputs, so its
    input width is ``stem_channels + (j - 1) * growth``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.stem = Conv3d(1, cfg.stem_channels, 3, rng, padding=1)
        self.stem_mod = Modulation(cfg.stem_channels, cfg, rng)
        self.dense = []
        self.dense_mod = []
        width = cfg.stem_channels
        for _ in range(cfg.dense_layers):
            self.dense.append(Conv3d(width, cfg.growth, 3, rng, padding=1))
            self.dense_mod.append(Modulation(cfg.growth, cfg, rng))
            width += cfg.growth
        self.project = Conv3d(width, 1, 3, rng, padding=1)

    def dense_input_widths(self) -> list[int]:
        return [conv.weight.shape[1] for conv in self.dense]

    def forward(self, x: Tensor, w: Tensor | None, mode: str, rng) -> Tensor:
        features = [self.stem_mod(self.stem(x), w, mode, rng)]
        for conv, mod in zip(self.dense, self.dense_mod):
            inp = features[0] if len(features) == 1 else ad.concat(features, axis=1)
            features.append(mod(conv(inp), w, mode, rng))
        return self.project(ad.concat(features, axis=1))


class UnetBackbone(Module):
    """Three-level 3D Unet: conv per level, maxpool down, nearest-upsample + conv up.

    With ``modulate`` every conv but the final 1x1x1 projection is followed
    by :class:`Modulation`; otherwise by a bare LeakyReLU.
    """

    def __init__(self, in_channels: int, out_channels: int, channels, rng: np.random.Generator,
                 cfg: ModelConfig | None = None, modulate: bool = False, slope: float = 0.2):
        if len(channels) != 3:
            raise ConfigError(f"Unet needs three level widths, got {channels}")
        c1, c2, c3 = channels
        self.slope = slope
        self.enc1 = Conv3d(in_channels, c1, 3, rng, padding=1)
        self.enc2 = Conv3d(c1, c2, 3, rng, padding=1)
        self.enc3 = Conv3d(c2, c3, 3, rng, padding=1)
        self.dec2 = Conv3d(c3 + c2, c2, 3, rng, padding=1)
        self.dec1 = Conv3d(c2 + c1, c1, 3, rng, padding=1)
        self.head = Conv3d(c1, out_channels, 1, rng)
        if modulate:
            self.mods = [Modulation(c, cfg, rng) for c in (c1, c2, c3, c2, c1)]
        else:
            self.mods = None

    def _act(self, i: int, f: Tensor, w, mode, rng) -> Tensor:
        if self.mods is None:
            return ad.leaky_relu(f, self.slope)
        return self.mods[i](f, w, mode, rng)

    def forward(self, x: Tensor, w: Tensor | None = None, mode: str = TEST, rng=None) -> Tensor:
        if any(n % 4 for n in x.shape[2:]):
            raise ConfigError(f"Unet needs spatial extents divisible by 4, got {x.shape[2:]}")
        e1 = self._act(0, self.enc1(x), w, mode, rng)
        e2 = self._act(1, self.enc2(ad.maxpool3d(e1, 2)), w, mode, rng)
        e3 = self._act(2, self.enc3(ad.maxpool3d(e2, 2)), w, mode, rng)
        d2 = self._act(3, self.dec2(ad.concat([ad.nearest_upsample3d(e3, 2), e2], axis=1)), w, mode, rng)
        d1 = self._act(4, self.dec1(ad.concat([ad.nearest_upsample3d(d2, 2), e1], axis=1)), w, mode, rng)
        return self.head(d1)


class Generator(Module):
    """Style-based generator. With noise and AdaIN both off it is the bare backbone."""

    def __init__(self, cfg: ModelConfig, size: int, rng: np.random.Generator):
        cfg.validate()
        if size % 16:
            raise ConfigError(f"generator input size must be divisible by 16, got {size}")
        self.cfg = cfg
        self.size = size
        self.mapping = (
            MappingNetwork(size, rng, cfg.mapping_channels, cfg.style_dim, cfg.slope, cfg.eps_sigma)
            if cfg.use_adain else None
        )
        if cfg.backbone == "dcitn":
            self.backbone = DCITN(cfg, rng)
        else:
            self.backbone = UnetBackbone(1, 1, cfg.unet_channels, rng, cfg, modulate=True, slope=cfg.slope)
        if cfg.zero_init_output:
            head = self.backbone.project if cfg.backbone == "dcitn" else self.backbone.head
            head.weight.data[:] = 0
            head.bias.data[:] = 0

    def forward(self, x: Tensor, mode: str = TEST, rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (self.size,) * 3:
            raise ConfigError(f"generator built for [N,1,{self.size}^3] volumes, got {x.shape}")
        w = self.mapping(x) if self.mapping is not None else None
        out = self.backbone(x, w, mode, rng)
        return out + x if self.cfg.residual else out

    def backbone_parameters(self) -> int:
        """Trainable scalars in the synthesis convs alone (no style or noise parts)."""
        total = 0
        for name, p in self.backbone.named_parameters():
            if "_mod" in name or name.startswith("mods"):
                continue
            total += p.size
        return total


class Critic(Module):
    """PatchGAN-style critic: four stride-2 k=4 stages and a 1-channel conv, no sigmoid.

    Scores are the spatial mean of the final patch map.
    """

    def __init__(self, channels=(32, 64, 128, 256), rng: np.random.Generator | None = None,
                 slope: float = 0.2):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.slope = slope
        self.stages = []
        prev = 1
        for ch in channels:
            self.stages.append(Conv3d(prev, ch, 4, rng, stride=2, padding=1))
            prev = ch
        self.head = Conv3d(prev, 1, 3, rng, padding=1)

    def patch_map(self, v: Tensor) -> Tensor:
        h = v
        for stage in self.stages:
            h = ad.leaky_relu(stage(h), self.slope)
        return self.head(h)

    def forward(self, v: Tensor) -> Tensor:
        patches = self.patch_map(v)
        return ad.mean(patches, axis=(1, 2, 3, 4))


class SegNet(Module):
    """Unet with one sigmoid output channel per ROI."""

    def __init__(self, n_rois: int, channels=(16, 32, 64), rng: np.random.Generator | None = None,
                 slope: float = 0.2):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_rois = n_rois
        self.unet = UnetBackbone(1, n_rois, channels, rng, slope=slope)

    def logits(self, v: Tensor) -> Tensor:
        return self.unet(v)

    def forward(self, v: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(v))


def generator_forward(G: Generator, x: Tensor, mode: str = TEST, rng=None) -> Tensor:
    return G(x, mode, rng)


def critic_forward(D: Critic, v: Tensor) -> Tensor:
    return D(v)


def segnet_forward(S: SegNet, v: Tensor) -> Tensor:
    return S(v)
