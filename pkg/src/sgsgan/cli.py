"""Command-line entry point: ``sgsgan <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data or file-format error,
4 numeric failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io, metrics, phantom, training
from .autodiff import NumericError, ShapeError, Tensor
from .config import Config
from .errors import ConfigError, DataError
from .nn import frozen
from .style import TEST

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides train.seed)")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--scale", type=int, help="divide every phase length by this")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _common(common)
    parser = argparse.ArgumentParser(prog="sgsgan", parents=[common],
                                     description="Segmentation-guided style GAN for low-dose volume translation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="simulate a paired phantom dataset")
    p.add_argument("--count", type=int, default=50, help="number of (x, y, s) triplets")
    p.add_argument("--size", type=int, help="grid edge (multiple of 16)")
    p.add_argument("--drf", type=int, help="dose reduction factor")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("train", parents=[common], help="run the alternate training schedule")
    p.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
    p.add_argument("--resume-from", help="start from this checkpoint instead of the output directory's last one")
    p.add_argument("--stop-after", type=int, help="stop after this many global epochs (resumable)")

    p = sub.add_parser("translate", parents=[common], help="apply a trained generator to one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="input .pvol")

    p = sub.add_parser("eval", parents=[common], help="metric table for a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output .tsv (a .json and .txt are written beside it)")
    p.add_argument("--split", default="test", choices=phantom.SPLITS)
    p.add_argument("--harness", help="cache file for the Unet-score segmenter weights")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward rule")
    p.add_argument("--only", nargs="*", help="restrict to these case names")

    p = sub.add_parser("report", parents=[common], help="render a stored report or metrics log")
    p.add_argument("--in", dest="inp", required=True, help="report .json or training metrics.log")
    p.add_argument("--format", choices=("tsv", "text"), default="text")
    return parser


def resolve_config(args) -> Config:
    cfg = io.parse_config(args.config) if args.config else Config().validate()
    train = cfg.train
    if args.seed is not None:
        train = type(train)(**{**train.__dict__, "seed": args.seed})
    if args.scale is not None:
        train = type(train)(**{**train.__dict__, "scale": args.scale})
    cfg = cfg.replace(train=train)
    extra = {}
    if getattr(args, "size", None) is not None:
        extra["size"] = args.size
    if getattr(args, "drf", None) is not None:
        extra["drf"] = args.drf
    if extra:
        cfg = cfg.replace(phantom=type(cfg.phantom)(**{**cfg.phantom.__dict__, **extra}))
    return cfg.validate()


def _need_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def dataset_digest(root) -> str:
    h = hashlib.sha256()
    root = Path(root)
    h.update((root / phantom.MANIFEST).read_bytes())
    for row in phantom.read_manifest(root):
        for name in ("x.pvol", "y.pvol", "s.pmsk"):
            h.update((root / row.split / row.case_id / name).read_bytes())
    return h.hexdigest()[:16]


def cmd_phantom(args, cfg: Config) -> int:
    out = _need_out(args)
    rows = phantom.build_dataset(out, args.count, cfg.phantom, cfg.train.seed, force=args.force)
    n_train = sum(r.split == "train" for r in rows)
    specs = len({r.spec_hash for r in rows})
    log(f"wrote {len(rows)} triplets ({n_train} train, {len(rows) - n_train} test) from {specs} phantoms "
        f"at {cfg.phantom.size}^3, drf {cfg.phantom.drf}")
    log(f"dataset digest: {dataset_digest(out)}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    out = _need_out(args)
    train = phantom.load_split(args.data, "train")
    if train.x.shape[-1] != cfg.phantom.size:
        cfg = cfg.replace(phantom=type(cfg.phantom)(**{**cfg.phantom.__dict__, "size": train.x.shape[-1]}))
        log(f"phantom.size set to {cfg.phantom.size} from the dataset; config digest: {cfg.digest()}")
    try:
        val = training.Batches.from_dataset(phantom.load_split(args.data, "test"), cfg.train.intensity_scale)
    except DataError:
        val = None
    phases = cfg.train.scaled_schedule()
    log("schedule: " + ", ".join(f"{k}:{n}" for k, n in phases)
        + " | boundaries at " + ", ".join(map(str, training.boundaries(phases))))
    start = time.time()
    result = training.run_schedule(
        cfg, training.Batches.from_dataset(train, cfg.train.intensity_scale), out, val,
        resume_from=args.resume_from, stop_after=args.stop_after,
        on_epoch=lambda line: log(f"{line}  [{time.time() - start:.0f}s]"),
    )
    state = "finished" if result.finished else f"stopped at epoch {result.global_epoch}"
    log(f"{state}; checkpoints and {training.LOG_NAME} in {out}")
    return EXIT_OK


def _load_generator(path):
    ckpt = io.load_checkpoint(path)
    cfg = training.checkpoint_config(ckpt)
    models = training.build_models(cfg, cfg.phantom.size, cfg.train.seed)
    training.restore_checkpoint(models, ckpt)
    return cfg, models.G


def translate_volume(G, cfg: Config, vol: np.ndarray) -> np.ndarray:
    """Test-mode translation of one [1, Z, Y, X] volume in raw intensity units."""
    if vol.shape[0] != 1 or vol.shape[1:] != (G.size,) * 3:
        raise ShapeError(f"generator expects a single-channel {G.size}^3 volume, got {vol.shape}")
    scale = cfg.train.intensity_scale
    with frozen(G):
        out = G(Tensor((vol[None] / scale).astype(np.float32)), TEST).data[0]
    return (out * scale).astype(np.float32)


def cmd_translate(args, cfg: Config) -> int:
    out = _need_out(args)
    ckpt_cfg, G = _load_generator(args.ckpt)
    log(f"checkpoint config digest: {ckpt_cfg.digest()}")
    io.write_volume(out, translate_volume(G, ckpt_cfg, io.read_volume(args.inp)))
    log(f"wrote {out}")
    return EXIT_OK


def _harness(args, cfg: Config, data_root) -> metrics.UnetScoreHarness:
    h = metrics.UnetScoreHarness(cfg.eval, cfg.model.seg_channels, cfg.train.intensity_scale)
    key = json.dumps([cfg.eval.__dict__, list(cfg.model.seg_channels), cfg.train.intensity_scale,
                      dataset_digest(data_root)], sort_keys=True)
    if args.harness and Path(args.harness).exists():
        cached = io.load_checkpoint(args.harness)
        if cached.meta == key:
            h.load_state_dict(cached.params)
            log(f"loaded Unet-score harness from {args.harness}")
            return h
        log(f"{args.harness} was trained under different settings; retraining")
    train = phantom.load_split(data_root, "train")
    log(f"training Unet-score harness on {len(train)} full-dose cases for {cfg.eval.harness_epochs} epochs")
    h.fit(train.y, train.s, log=log)
    if args.harness:
        io.save_checkpoint(args.harness, io.Checkpoint(params=h.state_dict(), meta=key))
    return h


def cmd_eval(args, cfg: Config) -> int:
    ckpt_cfg, G = _load_generator(args.ckpt)
    log(f"checkpoint config digest: {ckpt_cfg.digest()}")
    data = phantom.load_split(args.data, args.split)
    harness = _harness(args, ckpt_cfg, args.data)
    y_hat = np.stack([translate_volume(G, ckpt_cfg, data.x[i]) for i in range(len(data))])
    label = "SGSGAN" if ckpt_cfg.model.use_adain else "DCITN"
    reports = [
        metrics.evaluate("low-dose", data.x, data.y, data.s, data.case_ids, ckpt_cfg.eval, harness),
        metrics.evaluate(label, y_hat, data.y, data.s, data.case_ids, ckpt_cfg.eval, harness),
        metrics.evaluate("full-dose", data.y, data.y, data.s, data.case_ids, ckpt_cfg.eval, harness),
    ]
    report_path = Path(args.report)
    report_path.write_text(metrics.format_table(reports))
    report_path.with_suffix(".json").write_text(json.dumps([json.loads(r.to_json()) for r in reports], indent=1))
    report_path.with_suffix(".txt").write_text("\n".join(metrics.format_text(r) for r in reports))
    agg = reports[1].aggregate()
    log(f"{label}: PSNR {agg['PSNR.All']:.3f} SSIM {agg['SSIM.All']:.4f} MAE {agg['MAE.All']:.3f} "
        f"(low-dose PSNR {reports[0].aggregate()['PSNR.All']:.3f}); table in {report_path}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradsuite import run_suite

    start = time.time()
    results = run_suite(seed=cfg.train.seed, names=args.only, log=log)
    if not results:
        raise ConfigError("no gradient-check case matched")
    worst = max(results, key=lambda r: r.error)
    failed = [r.name for r in results if not r.passed]
    log(f"{len(results)} cases, max relative error {worst.error:.3e} ({worst.name}), {time.time() - start:.1f}s")
    if failed:
        log("FAILED: " + ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def summarize_log(path) -> str:
    """Last line of every phase in a training metrics log, as TSV."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != training.LOG_HEADER:
        raise DataError(f"{path} is not a training metrics log")
    last = {}
    for line in lines[1:]:
        parts = line.split()
        if len(parts) != 6:
            raise DataError(f"{path}: malformed log line {line!r}")
        last[parts[1]] = parts
    out = ["\t".join(training.LOG_HEADER.split())]
    out += ["\t".join(p) for p in last.values()]
    return "\n".join(out) + "\n"


def cmd_report(args, cfg: Config) -> int:
    path = Path(args.inp)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    text = path.read_text()
    if text.startswith(training.LOG_HEADER):
        rendered = summarize_log(path) if args.format == "tsv" else text
    else:
        try:
            blob = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} is neither a report nor a metrics log: {exc}") from None
        reports = [metrics.MetricReport.from_json(json.dumps(b)) for b in (blob if isinstance(blob, list) else [blob])]
        rendered = metrics.format_table(reports) if args.format == "tsv" else \
            "\n".join(metrics.format_text(r) for r in reports)
    if args.out:
        Path(args.out).write_text(rendered)
    else:
        sys.stdout.write(rendered)
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        log(f"config digest: {cfg.digest()}")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG
    except (DataError, ShapeError, FileNotFoundError) as exc:
        log(f"data error: {exc}")
        return EXIT_DATA
    except NumericError as exc:
        log(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
