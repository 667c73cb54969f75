"""Configuration dataclasses for every tunable of the pipeline.

Defaults reproduce the published settings where they exist (loss weights,
clipping, learning rate, noise level, dose reduction, phase lengths) and the
documented desk-scale choices elsewhere. ``io.parse_config`` maps a
``key = value`` file with ``[section]`` headers onto these classes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

ROI_NAMES = ("liver", "brain", "kidney", "bladder")

DEFAULT_SCHEDULE = (("GAN", 1200), ("S", 100), ("GAN", 300), ("S", 100))


@dataclass
class PhantomConfig:
    size: int = 32
    drf: int = 6
    rescale: bool = True
    background: float = 20.0
    activity_min: float = 100.0
    activity_max: float = 600.0
    lowdose_per_case: int = 2
    test_fraction: float = 0.2
    smoothing: int = 3

    def validate(self) -> None:
        if self.size < 16 or self.size % 16:
            raise ConfigError(f"phantom.size must be a positive multiple of 16, got {self.size}")
        if self.drf < 1:
            raise ConfigError(f"phantom.drf must be >= 1, got {self.drf}")
        if not 0 < self.background < self.activity_min <= self.activity_max:
            raise ConfigError("phantom activities must satisfy 0 < background < activity_min <= activity_max")
        if self.lowdose_per_case < 1:
            raise ConfigError("phantom.lowdose_per_case must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("phantom.test_fraction must lie in [0, 1)")
        if self.smoothing < 1 or self.smoothing % 2 == 0:
            raise ConfigError("phantom.smoothing must be an odd box width >= 1")


@dataclass
class ModelConfig:
    backbone: str = "dcitn"
    use_noise: bool = True
    use_adain: bool = True
    # normalisation applied after each backbone conv when AdaIN is off
    plain_norm: str = "none"
    residual: bool = True
    # start the output projection at zero so the generator begins as the identity
    zero_init_output: bool = True
    growth: int = 8
    dense_layers: int = 4
    stem_channels: int = 16
    unet_channels: tuple[int, ...] = (16, 32, 64)
    style_dim: int = 512
    mapping_channels: tuple[int, ...] = (16, 32, 64, 128)
    critic_channels: tuple[int, ...] = (32, 64, 128, 256)
    seg_channels: tuple[int, ...] = (16, 32, 64)
    slope: float = 0.2
    sigma_z: float = 0.01
    eps_sigma: float = 1e-5

    def validate(self) -> None:
        if self.backbone not in ("dcitn", "unet"):
            raise ConfigError(f"model.backbone must be 'dcitn' or 'unet', got {self.backbone!r}")
        if self.plain_norm not in ("none", "instance"):
            raise ConfigError(f"model.plain_norm must be 'none' or 'instance', got {self.plain_norm!r}")
        if len(self.mapping_channels) != 4:
            raise ConfigError("model.mapping_channels needs exactly four entries (one per block)")
        if len(self.critic_channels) != 4:
            raise ConfigError("model.critic_channels needs exactly four entries")
        if self.growth < 1 or self.dense_layers < 1 or self.stem_channels < 1:
            raise ConfigError("model growth, dense_layers and stem_channels must be positive")
        if self.sigma_z <= 0:
            raise ConfigError("model.sigma_z must be > 0")
        if not 0 <= self.slope < 1:
            raise ConfigError("model.slope must lie in [0, 1)")


@dataclass
class LossConfig:
    lambda1: float = 100.0
    lambda2: float = 1.0
    clip_c: float = 0.01
    dice_eps: float = 1e-5
    prob_clamp: float = 1e-7

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss.lambda1 and loss.lambda2 must be >= 0")
        if self.clip_c <= 0:
            raise ConfigError("loss.clip_c must be > 0")
        if self.dice_eps <= 0:
            raise ConfigError("loss.dice_eps must be > 0")


@dataclass
class TrainConfig:
    schedule: tuple[tuple[str, int], ...] = DEFAULT_SCHEDULE
    loops: int = 1
    scale: int = 1
    batch_size: int = 2
    lr: float = 1e-4
    rho: float = 0.99
    rms_floor: float = 1e-8
    n_critic: int = 1
    seg_guidance: bool = True
    sg_rois: tuple[int, ...] = (0, 1, 2, 3)
    intensity_scale: float = 600.0
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        for kind, epochs in self.schedule:
            if kind not in ("GAN", "S"):
                raise ConfigError(f"train.schedule phase kind must be GAN or S, got {kind!r}")
            if epochs < 1:
                raise ConfigError("train.schedule epochs must be >= 1")
        if self.loops < 1:
            raise ConfigError("train.loops must be >= 1")
        if self.scale < 1:
            raise ConfigError("train.scale must be >= 1")
        for _, epochs in self.schedule:
            if epochs // self.scale < 1:
                raise ConfigError(f"train.scale {self.scale} reduces a {epochs}-epoch phase to zero")
        if self.batch_size < 1 or self.n_critic < 1:
            raise ConfigError("train.batch_size and train.n_critic must be >= 1")
        if self.lr <= 0 or not 0 < self.rho < 1 or self.rms_floor <= 0:
            raise ConfigError("train.lr > 0, 0 < train.rho < 1, train.rms_floor > 0 required")
        if not self.sg_rois or len(set(self.sg_rois)) != len(self.sg_rois):
            raise ConfigError("train.sg_rois must list distinct ROI indices")
        if self.intensity_scale <= 0:
            raise ConfigError("train.intensity_scale must be > 0")

    def scaled_schedule(self) -> list[tuple[str, int]]:
        """Phase list with budgets divided by ``scale`` and repeated ``loops`` times."""
        one = [(kind, epochs // self.scale) for kind, epochs in self.schedule]
        return one * self.loops


@dataclass
class EvalConfig:
    harness_epochs: int = 30
    harness_lr: float = 3e-4
    harness_seed: int = 1234
    threshold: float = 0.5
    ssim_window: int = 7
    ssim_sigma: float = 1.5

    def validate(self) -> None:
        if self.harness_epochs < 1 or self.harness_lr <= 0:
            raise ConfigError("eval.harness_epochs >= 1 and eval.harness_lr > 0 required")
        if not 0 < self.threshold < 1:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError("eval.ssim_window must be odd")


@dataclass
class Config:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        for section in self.sections().values():
            section.validate()
        n_rois = len(ROI_NAMES)
        if any(not 0 <= r < n_rois for r in self.train.sg_rois):
            raise ConfigError(f"train.sg_rois entries must lie in [0, {n_rois})")
        return self

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)
