"""Adversarial, content and segmentation objectives.

Every voxel-summed term is divided by the voxel count, so the loss weights
keep their meaning across volume sizes. Segmentation targets are plain
binary arrays (or constant tensors); predictions are probability tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import LossConfig


def _const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _same_shape(a: Tensor, b, what: str) -> None:
    if tuple(a.shape) != tuple(np.shape(b.data if isinstance(b, Tensor) else b)):
        raise ShapeError(f"{what}: prediction {a.shape} vs target {np.shape(b)}")


def adv_loss_critic(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    """Wasserstein critic objective; minimising it pushes real scores up and fake down."""
    return ad.mean(scores_fake) - ad.mean(scores_real)


def adv_loss_generator(scores_fake: Tensor) -> Tensor:
    return -ad.mean(scores_fake)


def content_l1(y_hat: Tensor, y) -> Tensor:
    """Mean absolute voxel difference."""
    _same_shape(y_hat, y, "content_l1")
    return ad.mean(ad.tabs(y_hat - _const(y, y_hat)))


def bce_loss(s_hat: Tensor, s, clamp: float = 1e-7) -> Tensor:
    _same_shape(s_hat, s, "bce_loss")
    p = ad.clamp(s_hat, clamp, 1.0 - clamp)
    t = _const(s, s_hat)
    ll = t * ad.log(p) + (1.0 - t) * ad.log(1.0 - p)
    return -ad.mean(ll)


def dice_loss(s_hat: Tensor, s, eps: float = 1e-5) -> Tensor:
    """Soft dice loss over the whole array: 1 - 2 sum(s_hat*s) / (sum s_hat + sum s + eps)."""
    _same_shape(s_hat, s, "dice_loss")
    t = _const(s, s_hat)
    inter = ad.tsum(s_hat * t)
    denom = ad.tsum(s_hat) + float(np.sum(t.data)) + eps
    return 1.0 - 2.0 * inter / denom


def seg_loss(s_hat: Tensor, s, rois=None, eps: float = 1e-5, clamp: float = 1e-7) -> Tensor:
    """BCE + dice per ROI channel, averaged over the selected channels.

    ``s_hat`` and ``s`` are [N, R, D, H, W]. BCE is the voxel mean over the
    batch for one channel; dice is taken per instance and averaged, so one
    case with a large organ cannot swamp another.
    """
    _same_shape(s_hat, s, "seg_loss")
    if s_hat.ndim != 5:
        raise ShapeError(f"seg_loss expects [N,R,D,H,W], got {s_hat.shape}")
    target = s.data if isinstance(s, Tensor) else np.asarray(s)
    rois = range(s_hat.shape[1]) if rois is None else tuple(rois)
    terms = []
    for r in rois:
        pred_r = s_hat[:, r]
        bce = bce_loss(pred_r, target[:, r], clamp)
        dices = [dice_loss(pred_r[n], target[n, r], eps) for n in range(s_hat.shape[0])]
        dice = dices[0]
        for d in dices[1:]:
            dice = dice + d
        terms.append(bce + dice / float(len(dices)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


@dataclass
class GeneratorLoss:
    total: Tensor
    adv: float
    content: float
    seg: float


def total_generator_loss(adv, content, seg, lambda1: float, lambda2: float):
    """adv + lambda1 * content + lambda2 * seg; with lambda2 == 0 (or seg None) the seg term is dropped."""
    total = adv + lambda1 * content
    if seg is not None and lambda2 != 0:
        total = total + lambda2 * seg
    return total


def generator_objective(scores_fake: Tensor, y_hat: Tensor, y, cfg: LossConfig,
                        s_hat: Tensor | None = None, s=None, rois=None,
                        lambda2: float | None = None) -> GeneratorLoss:
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    adv = adv_loss_generator(scores_fake)
    content = content_l1(y_hat, y)
    seg = None
    if s_hat is not None and lam2 != 0:
        seg = seg_loss(s_hat, s, rois, cfg.dice_eps, cfg.prob_clamp)
    total = total_generator_loss(adv, content, seg, cfg.lambda1, lam2)
    return GeneratorLoss(total, adv.item(), content.item(), float("nan") if seg is None else seg.item())
