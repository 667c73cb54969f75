"""Ellipsoid activity phantoms, count-domain dose simulation, and dataset building.

Volumes are [Z, Y, X] arrays with axis 0 running feet to head. Full-dose
images are Poisson draws of the activity; low-dose images are Poisson draws
at ``activity / drf``, optionally rescaled by ``drf`` so both share one
intensity scale. A small boxcar blur follows either draw and stands in for
the resolution loss of reconstruction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .config import ROI_NAMES, PhantomConfig
from .errors import ConfigError, DataError

MANIFEST = "manifest.tsv"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class Organ:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    activity: float
    roi: int | None = None

    def indicator(self, size: int) -> np.ndarray:
        z, y, x = np.ogrid[:size, :size, :size]
        (cz, cy, cx), (az, ay, ax) = self.center, self.semi_axes
        return ((z - cz) / az) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    size: int
    organs: tuple[Organ, ...] = ()
    background: float = 20.0
    n_rois: int = len(ROI_NAMES)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class PhantomError(ConfigError):
    """A phantom specification that cannot be rendered."""


def render_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless activity [D,D,D] (float32) and ROI masks [R,D,D,D] (uint8)."""
    D = spec.size
    activity = np.full((D, D, D), spec.background, dtype=np.float64)
    masks = np.zeros((spec.n_rois, D, D, D), dtype=np.uint8)
    claimed = np.zeros((D, D, D), dtype=bool)
    for organ in spec.organs:
        if organ.activity <= 0:
            raise PhantomError(f"organ activity must exceed background, got +{organ.activity}")
        inside = organ.indicator(D)
        if not inside.any():
            raise PhantomError(f"organ at {organ.center} covers no voxel of the {D}^3 grid")
        activity[inside] += organ.activity
        if organ.roi is not None:
            if not 0 <= organ.roi < spec.n_rois:
                raise PhantomError(f"ROI label {organ.roi} outside [0, {spec.n_rois})")
            if (claimed & inside).any():
                raise PhantomError(f"ROI organ {organ.roi} overlaps another ROI organ")
            claimed |= inside
            masks[organ.roi] |= inside.astype(np.uint8)
    return activity.astype(np.float32), masks


def smooth(volume: np.ndarray, width: int = 3) -> np.ndarray:
    if width <= 1:
        return volume.astype(np.float32)
    return ndimage.uniform_filter(volume.astype(np.float64), size=width, mode="reflect").astype(np.float32)


def thinned_counts(activity: np.ndarray, drf: int, rng: np.random.Generator,
                   rescale: bool = True) -> np.ndarray:
    """Counts at ``1/drf`` of the dose, before any smoothing."""
    if drf < 1:
        raise ConfigError(f"drf must be >= 1, got {drf}")
    counts = rng.poisson(np.asarray(activity, dtype=np.float64) / drf).astype(np.float64)
    return counts * drf if rescale else counts


def simulate_full_dose(activity: np.ndarray, rng: np.random.Generator, smoothing: int = 3) -> np.ndarray:
    if np.any(activity < 0):
        raise ConfigError("activity must be nonnegative")
    return smooth(thinned_counts(activity, 1, rng), smoothing)


def simulate_low_dose(activity: np.ndarray, drf: int, rng: np.random.Generator,
                      rescale: bool = True, smoothing: int = 3) -> np.ndarray:
    if np.any(activity < 0):
        raise ConfigError("activity must be nonnegative")
    return smooth(thinned_counts(activity, drf, rng, rescale), smoothing)


def resize_volume(v: np.ndarray, target) -> np.ndarray:
    """Trilinear resize with corner-aligned grids, so endpoints map to endpoints."""
    target = tuple(int(t) for t in target)
    if len(target) != v.ndim or min(target) < 2:
        raise ConfigError(f"resize target must give {v.ndim} extents >= 2, got {target}")
    if target == v.shape:
        return v.copy()
    factors = [t / s for t, s in zip(target, v.shape)]
    out = ndimage.zoom(v.astype(np.float64), factors, order=1, mode="nearest", grid_mode=False)
    if out.shape != target:
        raise ConfigError(f"resize produced {out.shape}, wanted {target}")
    return np.clip(out, v.min(), v.max()).astype(v.dtype)


# Layout of the four ROI organs, as fractions of the grid edge. Liver is
# large and uniform, brain carries hot internal nuclei, kidney is mid-size,
# bladder is small and hot. ``band`` picks each organ's slice of the
# [activity_min, activity_max] range.
_LAYOUT = (
    dict(roi=0, center=(0.48, 0.50, 0.33), axes=(0.13, 0.15, 0.14), band=(0.0, 0.3)),
    dict(roi=1, center=(0.84, 0.50, 0.50), axes=(0.10, 0.13, 0.12), band=(0.3, 0.6)),
    dict(roi=2, center=(0.44, 0.52, 0.72), axes=(0.08, 0.06, 0.05), band=(0.3, 0.7)),
    dict(roi=3, center=(0.14, 0.50, 0.50), axes=(0.06, 0.07, 0.07), band=(0.8, 1.0)),
)


def random_spec(rng: np.random.Generator, cfg: PhantomConfig, max_tries: int = 100) -> PhantomSpec:
    """Draw organ centres, sizes and activities around the default layout.

    Draws with overlapping ROI organs are rejected and redrawn.
    """
    D = cfg.size
    lo, hi = cfg.activity_min, cfg.activity_max
    for _ in range(max_tries):
        organs = []
        for item in _LAYOUT:
            center = tuple(float(D * (c + rng.uniform(-0.04, 0.04))) for c in item["center"])
            axes = tuple(float(max(1.5, D * a * rng.uniform(0.8, 1.2))) for a in item["axes"])
            b0, b1 = item["band"]
            activity = float(rng.uniform(lo + b0 * (hi - lo), lo + b1 * (hi - lo)) - cfg.background)
            organs.append(Organ(center, axes, activity, item["roi"]))
            if item["roi"] == 1:
                # two hot nuclei inside the brain; not separate ROIs
                for side in (-1, 1):
                    off = (0.0, 0.0, side * organs[-1].semi_axes[2] * 0.4)
                    nc = tuple(c + o for c, o in zip(center, off))
                    r = max(1.0, 0.25 * min(axes))
                    organs.append(Organ(nc, (r, r, r), float(rng.uniform(0.1, 0.3) * (hi - lo))))
        spec = PhantomSpec(D, tuple(organs), cfg.background)
        try:
            render_phantom(spec)
        except PhantomError:
            continue
        return spec
    raise PhantomError(f"no non-overlapping layout after {max_tries} draws")


@dataclass
class Triplet:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    spec_hash: str


def simulate_case(spec: PhantomSpec, cfg: PhantomConfig, seed_seq: np.random.SeedSequence) -> list[Triplet]:
    """One full-dose image and ``lowdose_per_case`` low-dose samples of the same phantom."""
    activity, masks = render_phantom(spec)
    streams = [np.random.default_rng(s) for s in seed_seq.spawn(1 + cfg.lowdose_per_case)]
    y = simulate_full_dose(activity, streams[0], cfg.smoothing)
    h = spec.digest()
    return [
        Triplet(simulate_low_dose(activity, cfg.drf, rng, cfg.rescale, cfg.smoothing), y, masks, h)
        for rng in streams[1:]
    ]


@dataclass
class ManifestRow:
    case_id: str
    split: str
    spec_hash: str


def build_dataset(out_dir, n: int, cfg: PhantomConfig, seed: int, force: bool = False) -> list[ManifestRow]:
    """Write ``n`` triplets under ``out_dir/{train,test}/case_XXXX`` plus ``manifest.tsv``.

    Phantoms, not triplets, are assigned to splits, so the low-dose samples
    of one phantom never straddle train and test. Each phantom draws from
    its own stream seeded by ``(seed, phantom index)``.
    """
    cfg.validate()
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    per = cfg.lowdose_per_case
    n_specs = math.ceil(n / per)
    n_test_specs = int(round(n_specs * cfg.test_fraction))
    if cfg.test_fraction > 0 and n_specs > 1:
        n_test_specs = min(max(n_test_specs, 1), n_specs - 1)
    order = np.random.default_rng([seed, 0xD5]).permutation(n_specs)
    test_specs = set(order[:n_test_specs].tolist())

    rows = []
    case = 0
    for split in SPLITS:
        for idx in range(n_specs):
            if (idx in test_specs) != (split == "test"):
                continue
            spec_rng = np.random.default_rng([seed, idx, 0])
            spec = random_spec(spec_rng, cfg)
            triplets = simulate_case(spec, cfg, np.random.SeedSequence([seed, idx, 1]))
            # the last phantom is cut short when n is not a multiple of per
            keep = min(per, n - idx * per)
            for t in triplets[:keep]:
                case_id = f"case_{case:04d}"
                case_dir = out / split / case_id
                case_dir.mkdir(parents=True, exist_ok=True)
                io.write_volume(case_dir / "x.pvol", t.x)
                io.write_volume(case_dir / "y.pvol", t.y)
                io.write_mask(case_dir / "s.pmsk", t.s)
                rows.append(ManifestRow(case_id, split, t.spec_hash))
                case += 1
    write_manifest(out / MANIFEST, rows)
    return rows


def write_manifest(path, rows: list[ManifestRow]) -> None:
    lines = ["case_id\tsplit\tspec_hash"] + [f"{r.case_id}\t{r.split}\t{r.spec_hash}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(root) -> list[ManifestRow]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise DataError(f"no {MANIFEST} in {root}")
    rows = []
    lines = path.read_text().splitlines()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in SPLITS:
            raise DataError(f"{path}:{lineno}: malformed manifest row {line!r}")
        rows.append(ManifestRow(*parts))
    return rows


@dataclass
class Dataset:
    """Stacked triplets of one split: x, y [M,1,D,D,D] float32 and s [M,R,D,D,D] uint8."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    case_ids: list[str] = field(default_factory=list)
    spec_hashes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.x[idx], self.y[idx], self.s[idx],
                       [self.case_ids[i] for i in idx], [self.spec_hashes[i] for i in idx])


def load_split(root, split: str) -> Dataset:
    rows = [r for r in read_manifest(root) if r.split == split]
    if not rows:
        raise DataError(f"split {split!r} of {root} is empty")
    xs, ys, ss = [], [], []
    for r in rows:
        case_dir = Path(root) / split / r.case_id
        try:
            xs.append(io.read_volume(case_dir / "x.pvol"))
            ys.append(io.read_volume(case_dir / "y.pvol"))
            ss.append(io.read_mask(case_dir / "s.pmsk"))
        except FileNotFoundError as exc:
            raise DataError(f"missing file for {r.case_id}: {exc.filename}") from None
        if xs[-1].shape != ys[-1].shape or xs[-1].shape[1:] != ss[-1].shape[1:]:
            raise DataError(f"{r.case_id}: x/y/s spatial shapes disagree")
    return Dataset(np.stack(xs), np.stack(ys), np.stack(ss),
                   [r.case_id for r in rows], [r.spec_hash for r in rows])
