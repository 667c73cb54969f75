"""Desk-scale ablation: style+SG, style without SG, and plain DCITN over several seeds.

Every stage is cached under the output directory. Training runs resume
from their own ``last.ckpt``; evaluations are keyed by the checkpoint
hash. Re-running after an interruption therefore only does missing work.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, metrics, phantom, training
from .config import DEFAULT_SCHEDULE, ROI_NAMES, Config, EvalConfig, ModelConfig, PhantomConfig, TrainConfig

VARIANTS = ("sg", "nosg", "plain")


@dataclass
class DeskConfig:
    out: Path = Path("results/desk")
    seeds: tuple[int, ...] = (0, 1, 2)
    n_cases: int = 50
    data_seed: int = 7
    size: int = 32
    scale: int = 20
    checkpoint_every: int = 5
    noise_seed: int = 99
    schedule: tuple[tuple[str, int], ...] = DEFAULT_SCHEDULE
    harness_epochs: int = 30
    variants: tuple[str, ...] = VARIANTS


def variant_config(variant: str, seed: int, desk: DeskConfig) -> Config:
    model = ModelConfig() if variant != "plain" else ModelConfig(use_noise=False, use_adain=False)
    train = TrainConfig(schedule=desk.schedule, scale=desk.scale, seed=seed, seg_guidance=variant == "sg",
                        checkpoint_every=desk.checkpoint_every)
    return Config(phantom=PhantomConfig(size=desk.size), model=model, train=train).validate()


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_json(path):
    path = Path(path)
    return json.loads(path.read_text()) if path.exists() else None


def _dump_json(path, obj) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    tmp.replace(path)


def build_data(desk: DeskConfig, log=print) -> Path:
    root = desk.out / "data"
    if not (root / phantom.MANIFEST).exists():
        log(f"building {desk.n_cases} phantom triplets at {desk.size}^3 in {root}")
        phantom.build_dataset(root, desk.n_cases, PhantomConfig(size=desk.size), desk.data_seed, force=True)
    return root


def train_variant(variant: str, seed: int, desk: DeskConfig, train: training.Batches,
                  val: training.Batches, log=print) -> Path:
    """Train one variant/seed to completion (or continue it); returns its run directory."""
    cfg = variant_config(variant, seed, desk)
    run = desk.out / f"{variant}_seed{seed}"
    run.mkdir(parents=True, exist_ok=True)
    stats_path = run / "run_stats.json"
    stats = _load_json(stats_path) or {"cpu_seconds": 0.0, "max_critic_abs": 0.0, "clip_events": 0}
    if (run / training.LAST).exists() and io.load_checkpoint(run / training.LAST).global_epoch == \
            sum(n for _, n in cfg.train.scaled_schedule()):
        return run

    resume_from = None
    if variant == "nosg" and not (run / training.LAST).exists():
        # the no-SG run shares the SG run's first GAN phase exactly
        resume_from = train_variant("sg", seed, desk, train, val, log) / "phase1.ckpt"
        base = _load_json(desk.out / f"sg_seed{seed}" / "phase1_stats.json") or {}
        stats.update({k: base.get(k, stats[k]) for k in stats})

    tick = [time.process_time()]
    track = {"max": stats["max_critic_abs"], "n": stats["clip_events"]}

    def on_clip(D):
        track["max"] = max(track["max"], max(float(np.abs(p.data).max()) for p in D.parameters()))
        track["n"] += 1

    def on_epoch(line):
        now = time.process_time()
        stats["cpu_seconds"] += now - tick[0]
        tick[0] = now
        stats["max_critic_abs"], stats["clip_events"] = track["max"], track["n"]
        _dump_json(stats_path, stats)
        epoch = int(line.split()[0])
        if variant == "sg" and epoch == cfg.train.scaled_schedule()[0][1]:
            _dump_json(run / "phase1_stats.json", stats)
        log(f"[{variant} seed {seed}] {line}  cpu {stats['cpu_seconds']:.0f}s")

    log(f"[{variant} seed {seed}] config digest {cfg.digest()}")
    training.run_schedule(cfg, train, run, val, resume_from=resume_from, on_clip=on_clip, on_epoch=on_epoch)
    return run


def get_harness(desk: DeskConfig, train_ds: phantom.Dataset, log=print) -> metrics.UnetScoreHarness:
    cfg = Config(eval=EvalConfig(harness_epochs=desk.harness_epochs))
    h = metrics.UnetScoreHarness(cfg.eval, cfg.model.seg_channels, cfg.train.intensity_scale)
    path = desk.out / "harness.ckpt"
    if path.exists():
        h.load_state_dict(io.load_checkpoint(path).params)
        return h
    start = time.process_time()
    log(f"training Unet-score harness on {len(train_ds)} full-dose volumes")
    h.fit(train_ds.y, train_ds.s, log=log)
    io.save_checkpoint(path, io.Checkpoint(params=h.state_dict(), meta=json.dumps(
        {"cpu_seconds": time.process_time() - start, "losses": h.losses})))
    return h


def noise_volumes(y: np.ndarray, seed: int) -> np.ndarray:
    """Uniform noise over each case's own intensity range: no anatomy at all."""
    rng = np.random.default_rng(seed)
    lo = y.min(axis=(1, 2, 3, 4), keepdims=True)
    hi = y.max(axis=(1, 2, 3, 4), keepdims=True)
    return (lo + (hi - lo) * rng.random(y.shape)).astype(np.float32)


def evaluate_run(run: Path, test_ds: phantom.Dataset, harness, log=print) -> dict:
    ckpt_path = run / training.LAST
    key = _sha(ckpt_path)
    cached = _load_json(run / "eval.json")
    if cached and cached.get("ckpt_sha") == key:
        return cached
    ckpt = io.load_checkpoint(ckpt_path)
    cfg = training.checkpoint_config(ckpt)
    models = training.build_models(cfg, cfg.phantom.size, cfg.train.seed)
    training.restore_checkpoint(models, ckpt)
    scale = cfg.train.intensity_scale
    y_hat = training.generate(models.G, (test_ds.x / scale).astype(np.float32)) * scale
    report = metrics.evaluate(run.name, y_hat, test_ds.y, test_ds.s, test_ds.case_ids, cfg.eval, harness)
    out = {"ckpt_sha": key, "config_digest": cfg.digest(), "aggregate": report.aggregate(),
           "log_sha": _sha(run / training.LOG_NAME)}
    (run / "eval_report.json").write_text(report.to_json())
    _dump_json(run / "eval.json", out)
    log(f"evaluated {run.name}: PSNR {out['aggregate']['PSNR.All']:.3f} SSIM {out['aggregate']['SSIM.All']:.4f}")
    return out


def reference_rows(desk: DeskConfig, test_ds, harness) -> dict:
    path = desk.out / "reference.json"
    cached = _load_json(path)
    if cached:
        return cached
    ev = Config().eval
    rows = {
        "low-dose": metrics.evaluate("low-dose", test_ds.x, test_ds.y, test_ds.s, test_ds.case_ids, ev, harness),
        "full-dose": metrics.evaluate("full-dose", test_ds.y, test_ds.y, test_ds.s, test_ds.case_ids, ev, harness),
        "noise": metrics.evaluate("noise", noise_volumes(test_ds.y, desk.noise_seed), test_ds.y, test_ds.s,
                                  test_ds.case_ids, ev, harness),
    }
    out = {k: r.aggregate() for k, r in rows.items()}
    _dump_json(path, out)
    return out


def guided_roi_mae(agg: dict, rois) -> float:
    return float(np.mean([agg[f"MAE.{ROI_NAMES[r]}"] for r in rois]))


def summarize(desk: DeskConfig, evals: dict, stats: dict, refs: dict, harness_cpu: float) -> dict:
    means = {}
    for variant, per_seed in evals.items():
        keys = sorted(per_seed[next(iter(per_seed))]["aggregate"])
        means[variant] = {k: float(np.mean([e["aggregate"][k] for e in per_seed.values()])) for k in keys}
    rois = TrainConfig().sg_rois
    for variant in means:
        means[variant]["MAE.guided"] = guided_roi_mae(means[variant], rois)
    # nosg shares its first phase with sg, so that stretch is counted once
    cpu = harness_cpu + sum(s["cpu_seconds"] for v, per in stats.items() for s in per.values() if v != "nosg")
    for seed, s in stats.get("nosg", {}).items():
        cpu += s["cpu_seconds"] - s.get("inherited_cpu", 0.0)
    return {
        "seeds": list(desk.seeds),
        "reference": refs,
        "runs": {v: {str(k): {"aggregate": e["aggregate"], **stats[v][k]} for k, e in per.items()}
                 for v, per in evals.items()},
        "means": means,
        "guided_rois": [ROI_NAMES[r] for r in rois],
        "max_critic_abs": max(s["max_critic_abs"] for per in stats.values() for s in per.values()),
        "cpu_seconds_total": cpu,
    }


def run_desk(desk: DeskConfig | None = None, log=print) -> dict:
    desk = desk or DeskConfig()
    desk.out = Path(desk.out)
    desk.out.mkdir(parents=True, exist_ok=True)
    root = build_data(desk, log)
    train_ds, test_ds = phantom.load_split(root, "train"), phantom.load_split(root, "test")
    scale = Config().train.intensity_scale
    train, val = training.Batches.from_dataset(train_ds, scale), training.Batches.from_dataset(test_ds, scale)
    harness = get_harness(desk, train_ds, log)
    harness_cpu = json.loads(io.load_checkpoint(desk.out / "harness.ckpt").meta).get("cpu_seconds", 0.0)
    refs = reference_rows(desk, test_ds, harness)

    evals, stats = {}, {}
    for seed in desk.seeds:
        for variant in desk.variants:
            run = train_variant(variant, seed, desk, train, val, log)
            evals.setdefault(variant, {})[seed] = evaluate_run(run, test_ds, harness, log)
            s = dict(_load_json(run / "run_stats.json") or {})
            if variant == "nosg":
                s["inherited_cpu"] = (_load_json(desk.out / f"sg_seed{seed}" / "phase1_stats.json") or {}).get(
                    "cpu_seconds", 0.0)
            stats.setdefault(variant, {})[seed] = s
    summary = summarize(desk, evals, stats, refs, harness_cpu)
    _dump_json(desk.out / "summary.json", summary)
    return summary


def format_summary(summary: dict) -> str:
    cols = ["PSNR.All", "SSIM.All", "MAE.All", "MAE.guided", "UnetScore.All"]
    lines = ["\t".join(["row"] + cols)]
    rois = summary["guided_rois"]
    for name, agg in summary["reference"].items():
        agg = dict(agg, **{"MAE.guided": float(np.mean([agg[f"MAE.{r}"] for r in rois]))})
        lines.append("\t".join([name] + [f"{agg[c]:.4f}" for c in cols]))
    for variant, agg in summary["means"].items():
        lines.append("\t".join([f"{variant} (mean)"] + [f"{agg[c]:.4f}" for c in cols]))
    lines.append(f"max |critic param| over all updates: {summary['max_critic_abs']:.6g}")
    lines.append(f"CPU time: {summary['cpu_seconds_total'] / 3600:.2f} h")
    return "\n".join(lines) + "\n"
