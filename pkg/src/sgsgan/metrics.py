"""Image-quality and overlap metrics, the Unet-score harness, and report formatting.

All functions take plain arrays of one case ([D,H,W] or [1,D,H,W]) unless
stated otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .config import ROI_NAMES, EvalConfig
from .errors import ConfigError, DataError
from .losses import seg_loss
from .networks import SegNet
from .nn import frozen

PSNR_CAP = 200.0
K1, K2 = 0.01, 0.03


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _range(y: np.ndarray) -> float:
    return float(y.max() - y.min())


def psnr(y_hat, y, data_range: float | None = None) -> float:
    y_hat, y = _pair(y_hat, y, "psnr")
    data_range = _range(y) if data_range is None else float(data_range)
    if data_range <= 0:
        raise ConfigError("psnr needs a positive data range (ground truth is constant)")
    mse = float(np.mean((y_hat - y) ** 2))
    if mse < 1e-20:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 3-D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_valid(v: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = v
    for axis in range(v.ndim):
        out = ndimage.correlate1d(out, taps, axis=axis, mode="constant")
    h = len(taps) // 2
    return out[tuple(slice(h, n - h) for n in v.shape)]


def ssim_map(a, b, data_range: float | None = None, window: int = 7, sigma: float = 1.5) -> np.ndarray:
    """Local SSIM at every voxel where the whole window fits inside the volume."""
    a, b = _pair(a, b, "ssim3d")
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 3:
        raise ConfigError(f"ssim3d expects a single 3-D volume, got shape {a.shape}")
    if min(a.shape) < window:
        raise ConfigError(f"volume {a.shape} is smaller than the {window}^3 SSIM window")
    if data_range is None:
        data_range = max(a.max(), b.max()) - min(a.min(), b.min())
    if data_range <= 0:
        data_range = 1.0
    taps = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    saa = _filter_valid(a * a, taps) - mu_a * mu_a
    sbb = _filter_valid(b * b, taps) - mu_b * mu_b
    sab = _filter_valid(a * b, taps) - mu_a * mu_b
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim3d(a, b, data_range: float | None = None, window: int = 7, sigma: float = 1.5) -> float:
    """Mean local SSIM (Gaussian window). Without ``data_range`` the joint range of both inputs is used."""
    return float(np.mean(ssim_map(a, b, data_range, window, sigma)))


def mae(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y, "mae")
    return float(np.mean(np.abs(y_hat - y)))


def nrmse(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y, "nrmse")
    r = _range(y)
    if r <= 0:
        raise ConfigError("nrmse is undefined for a constant ground truth")
    return float(np.sqrt(np.mean((y_hat - y) ** 2)) / r)


def bias(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y, "bias")
    return float(np.mean(y_hat - y))


def variance(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y, "variance")
    return float(np.var(y_hat - y))


def _mask_bool(mask, shape) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != shape:
        m = np.squeeze(m)
        if m.shape != shape:
            raise ConfigError(f"mask shape {np.shape(mask)} does not match volume {shape}")
    if not np.isin(m, (0, 1)).all():
        raise ConfigError("mask must be binary")
    return m.astype(bool)


def masked_metric(metric: str, y_hat, y, mask, data_range: float | None = None,
                  window: int = 7, sigma: float = 1.5) -> float:
    """``metric`` restricted to the voxels of ``mask``.

    PSNR keeps the whole-volume ground-truth range as its peak so values are
    comparable across regions. SSIM averages the local SSIM map of the masked
    images over mask voxels whose window fits in the volume.
    """
    y_hat, y = _pair(y_hat, y, metric)
    y_hat, y = np.squeeze(y_hat), np.squeeze(y)
    m = _mask_bool(mask, y.shape)
    if not m.any():
        raise ConfigError("masked metric over an empty mask")
    if metric == "ssim":
        rng = _range(y) if data_range is None else data_range
        smap = ssim_map(y_hat * m, y * m, rng, window, sigma)
        h = window // 2
        inner = m[tuple(slice(h, n - h) for n in m.shape)]
        if not inner.any():
            raise ConfigError("mask has no voxel far enough from the border for the SSIM window")
        return float(smap[inner].mean())
    a, b = y_hat[m], y[m]
    if metric == "psnr":
        return psnr(a, b, _range(y) if data_range is None else data_range)
    if metric == "mae":
        return mae(a, b)
    if metric == "mse":
        return float(np.mean((a - b) ** 2))
    if metric == "bias":
        return bias(a, b)
    if metric == "variance":
        return variance(a, b)
    if metric == "nrmse":
        r = _range(y) if data_range is None else data_range
        return float(np.sqrt(np.mean((a - b) ** 2)) / r)
    raise ConfigError(f"unknown metric {metric!r}")


def dice(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ConfigError(f"dice: shapes {a.shape} and {b.shape} differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# -------------------------------------------------------------------- harness


class UnetScoreHarness:
    """A segmenter trained once on full-dose images and their masks, then frozen.

    ``score`` feeds it any stack of volumes (raw intensities) and returns the
    dice of its thresholded output against the reference masks. Inputs are
    divided by ``intensity_scale`` exactly as in training the generator.
    """

    def __init__(self, cfg: EvalConfig | None = None, channels=(16, 32, 64),
                 intensity_scale: float = 600.0, n_rois: int = len(ROI_NAMES)):
        self.cfg = cfg or EvalConfig()
        self.intensity_scale = intensity_scale
        self.net = SegNet(n_rois, channels, np.random.default_rng([self.cfg.harness_seed, 1]))
        self.trained = False
        self.losses: list[float] = []

    def fit(self, y: np.ndarray, s: np.ndarray, batch_size: int = 2, log=None) -> "UnetScoreHarness":
        from .training import RMSProp

        if y.shape[0] == 0:
            raise DataError("harness needs at least one training case")
        opt = RMSProp(self.net.named_parameters(), self.cfg.harness_lr)
        inputs = (y / self.intensity_scale).astype(np.float32)
        targets = s.astype(np.float32)
        for epoch in range(self.cfg.harness_epochs):
            rng = np.random.default_rng([self.cfg.harness_seed, 2, epoch])
            order = rng.permutation(y.shape[0])
            total = 0.0
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                opt.zero_grad()
                loss = seg_loss(self.net(Tensor(inputs[idx])), targets[idx])
                loss.backward()
                opt.step()
                total += loss.item()
            self.losses.append(total / math.ceil(len(order) / batch_size))
            if log is not None:
                log(f"harness epoch {epoch + 1}/{self.cfg.harness_epochs} seg_loss {self.losses[-1]:.5f}")
        self.trained = True
        return self

    def predict(self, v: np.ndarray, batch_size: int = 4) -> np.ndarray:
        if not self.trained:
            raise ConfigError("Unet-score harness has not been trained")
        outs = []
        with frozen(self.net):
            for start in range(0, v.shape[0], batch_size):
                batch = (v[start:start + batch_size] / self.intensity_scale).astype(np.float32)
                outs.append(self.net(Tensor(batch)).data)
        return np.concatenate(outs) >= self.cfg.threshold

    def score(self, v: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Dice per case and ROI, shape [M, R]."""
        pred = self.predict(v)
        return np.array([[dice(pred[i, r], s[i, r]) for r in range(s.shape[1])] for i in range(s.shape[0])])

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.net.state_dict()

    def load_state_dict(self, state) -> None:
        self.net.load_state_dict(state)
        self.trained = True


# --------------------------------------------------------------------- report

REGIONS = ROI_NAMES + ("All",)
TABLE_METRICS = ("PSNR", "SSIM", "MAE", "UnetScore")


@dataclass
class MetricReport:
    """Per-case metric dictionaries plus their arithmetic means."""

    label: str
    cases: dict[str, dict[str, float]] = field(default_factory=dict)
    data_range: dict[str, float] = field(default_factory=dict)

    def aggregate(self) -> dict[str, float]:
        keys = sorted({k for v in self.cases.values() for k in v})
        return {k: float(np.mean([v[k] for v in self.cases.values() if k in v])) for k in keys}

    def to_json(self) -> str:
        return json.dumps({"label": self.label, "cases": self.cases, "data_range": self.data_range},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["label"], d["cases"], d.get("data_range", {}))


def case_metrics(y_hat: np.ndarray, y: np.ndarray, s: np.ndarray, cfg: EvalConfig | None = None,
                 unet_dice: np.ndarray | None = None) -> dict[str, float]:
    """Whole-volume and per-ROI metrics of one case; ``s`` is [R, D, H, W]."""
    cfg = cfg or EvalConfig()
    y_hat, y = np.squeeze(y_hat), np.squeeze(y)
    r = _range(y)
    out = {
        "PSNR.All": psnr(y_hat, y, r),
        "SSIM.All": ssim3d(y_hat, y, r, cfg.ssim_window, cfg.ssim_sigma),
        "MAE.All": mae(y_hat, y),
        "NRMSE.All": nrmse(y_hat, y),
        "Bias.All": bias(y_hat, y),
        "Variance.All": variance(y_hat, y),
    }
    for i, name in enumerate(ROI_NAMES[: s.shape[0]]):
        if not s[i].any():
            continue
        out[f"PSNR.{name}"] = masked_metric("psnr", y_hat, y, s[i], r)
        out[f"MAE.{name}"] = masked_metric("mae", y_hat, y, s[i])
        try:
            out[f"SSIM.{name}"] = masked_metric("ssim", y_hat, y, s[i], r, cfg.ssim_window, cfg.ssim_sigma)
        except ConfigError:
            pass
    if unet_dice is not None:
        for i, name in enumerate(ROI_NAMES[: len(unet_dice)]):
            out[f"UnetScore.{name}"] = float(unet_dice[i])
        out["UnetScore.All"] = float(np.mean(unet_dice))
    return out


def evaluate(label: str, y_hat: np.ndarray, y: np.ndarray, s: np.ndarray, case_ids,
             cfg: EvalConfig | None = None, harness: UnetScoreHarness | None = None) -> MetricReport:
    """Report over a stack of cases (arrays [M,1,D,H,W], masks [M,R,D,H,W])."""
    unet = harness.score(y_hat, s) if harness is not None else None
    report = MetricReport(label)
    for i, cid in enumerate(case_ids):
        report.cases[cid] = case_metrics(y_hat[i], y[i], s[i], cfg, None if unet is None else unet[i])
        report.data_range[cid] = _range(y[i])
    return report


def format_text(report: MetricReport) -> str:
    lines = [f"label = {report.label}"]
    for cid in sorted(report.cases):
        lines.append("")
        lines.append(f"[case {cid}]")
        lines.append(f"data_range = {report.data_range.get(cid, float('nan')):.6g}")
        for k, v in sorted(report.cases[cid].items()):
            lines.append(f"{k} = {v:.6g}")
    lines.append("")
    lines.append("[aggregate]")
    lines.append(f"cases = {len(report.cases)}")
    for k, v in report.aggregate().items():
        lines.append(f"{k} = {v:.6g}")
    return "\n".join(lines) + "\n"


def table_columns() -> list[str]:
    return [f"{m}.{r}" for m in TABLE_METRICS for r in REGIONS]


def format_table(reports) -> str:
    """One row per report, columns metric x region; missing cells are ``-``."""
    cols = table_columns()
    lines = ["\t".join(["method"] + cols)]
    for rep in reports:
        agg = rep.aggregate()
        cells = [f"{agg[c]:.4f}" if c in agg else "-" for c in cols]
        lines.append("\t".join([rep.label] + cells))
    return "\n".join(lines) + "\n"
