"""``hand`` command line: preprocess, train, score, eval and ablation.

Exit codes: 0 success, 2 bad input (files, config, data), 3 numerical abort
during training, 4 checkpoint format-version mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .benchmark import EvalSet, Variant, make_eval_set, run_experiment, uses_discriminator
from .checkpoint import CheckpointVersionError, load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import SEED_ENV, ConfigError, RunConfig, load_config
from .evaluation import build_report, category_label, is_normal, write_report
from .preprocess import PreprocessError, file_sha256, read_png16, resize_bilinear, run_pipeline
from .scoring import ScoreCalibration, infer, read_scores, score_records, write_scores
from .training import NonFiniteLossError, TrainConfig, TrainingError, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_VERSION = 4

log = logging.getLogger("hand")


class InputError(ValueError):
    pass


# ------------------------------------------------------------------ manifest


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    master_seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def add_output(self, path: Path) -> None:
        self.outputs[str(path)] = file_sha256(path)

    def write(self, path: Path) -> Path:
        self.finished = _now()
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(command: str, args, cfg: RunConfig | None, inputs: dict[str, str]) -> RunManifest:
    return RunManifest(
        command=command,
        config_path=getattr(args, "config", None),
        config=cfg.snapshot() if cfg else {},
        master_seed=cfg.train.master_seed if cfg else None,
        inputs=inputs,
        started=_now(),
    )


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# ------------------------------------------------------------------ data


@dataclass
class ImageSet:
    image_ids: list[str]
    images: list[np.ndarray]
    categories: list[str]


def load_image_dir(data_dir: str | Path, size: int | None = None) -> ImageSet:
    """Load PNGs and their categories from a data directory.

    With a ``manifest.csv`` (as written by ``hand preprocess``) images are
    ``<image_id>.png`` and categories come from its ``category`` column.
    Otherwise top-level PNGs are Normal and each subdirectory name is the
    category of the PNGs inside it.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise InputError(f"data directory not found: {root}")
    entries: list[tuple[str, Path, str]] = []
    manifest = root / "manifest.csv"
    if manifest.exists():
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                entries.append((row["image_id"], root / f"{row['image_id']}.png", row.get("category") or "normal"))
    else:
        entries += [(p.stem, p, "normal") for p in sorted(root.glob("*.png"))]
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            entries += [(f"{sub.name}/{p.stem}", p, sub.name) for p in sorted(sub.glob("*.png"))]
    if not entries:
        raise InputError(f"no images found in {root}")
    ids, images, cats = [], [], []
    for image_id, path, category in entries:
        try:
            img = read_png16(path)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read {path}: {exc}") from exc
        if size is not None and img.shape != (size, size):
            img = resize_bilinear(img, (size, size))
        ids.append(image_id)
        images.append(img)
        cats.append(category)
    return ImageSet(ids, images, cats)


def _normal_images(data: ImageSet) -> list[np.ndarray]:
    imgs = [img for img, c in zip(data.images, data.categories) if is_normal(c)]
    skipped = len(data.images) - len(imgs)
    if skipped:
        log.info("training on %d Normal images, %d non-Normal images left out", len(imgs), skipped)
    if not imgs:
        raise InputError("no Normal images to train on")
    return imgs


def _recon_name(image_id: str) -> str:
    return image_id.replace("/", "__") + ".npz"


# ------------------------------------------------------------------ commands


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    run = _manifest("preprocess", args, cfg, {"in": args.in_dir, "meta": args.meta})
    manifest = run_pipeline(args.in_dir, args.meta, out, cfg.crop_threshold, cfg.prune_sigma)
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            run.add_output(out / f"{row['image_id']}.png")
    run.add_output(manifest)
    run.write(out / "run_manifest.json")
    log.info("wrote %d images to %s", len(run.outputs) - 1, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = load_image_dir(args.data, cfg.model.input_size)
    run = _manifest("train", args, cfg, {"data": str(args.data)})
    metrics = _sidecar(out, "_metrics.csv")
    metrics.unlink(missing_ok=True)

    def sink(ckpt, epoch):
        save_checkpoint(ckpt, out)
        log.info("epoch %d: checkpoint saved", epoch)

    result = train(_normal_images(data), cfg.train, cfg.model, cfg.synth, checkpoint_sink=sink,
                   metrics_csv=metrics)
    run.add_output(out)
    if metrics.exists():
        run.add_output(metrics)
    run.write(_sidecar(out, "_manifest.json"))
    if result.epoch_reports:
        last = result.epoch_reports[-1]
        log.info("final epoch: L1 %.5f, ID recon %.5f, disc %.4f", last.loss_l1, last.loss_recon_id, last.loss_disc)
    return EXIT_OK


def _calibration(mode: str) -> ScoreCalibration | None:
    if mode == "batch":
        return None
    if mode.startswith("frozen:"):
        path = Path(mode.split(":", 1)[1])
        try:
            return ScoreCalibration.from_json(path)
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"cannot read calibration {path}: {exc}") from exc
    raise InputError(f"--calib must be 'batch' or 'frozen:FILE', got {mode!r}")


def cmd_score(args) -> int:
    calibration = _calibration(args.calib)
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    data = load_image_dir(args.data, model.config.input_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run = _manifest("score", args, None, {"ckpt": str(args.ckpt), "data": str(args.data), "calib": args.calib})
    run.master_seed = int(ckpt["master_seed"])
    run.config = {"train": ckpt.get("train_config", {}), "model": ckpt["model_config"]}

    use_probability = uses_discriminator(TrainConfig(**ckpt["train_config"])) if ckpt.get("train_config") else True
    errors, probs, recons = infer(model, data.images)
    records, calibration = score_records(data.image_ids, errors, probs, data.categories, calibration,
                                         use_probability=use_probability)
    write_scores(out, records, args.threshold)
    calib_path = _sidecar(out, "_calibration.json")
    calibration.to_json(calib_path)
    recon_dir = _sidecar(out, "_recon")
    recon_dir.mkdir(exist_ok=True)
    for image_id, img, rec in zip(data.image_ids, data.images, recons):
        np.savez(recon_dir / _recon_name(image_id), input=img, reconstruction=rec)
    low = sum(r.low_confidence for r in records)
    if low:
        log.warning("%d records scored with a degenerate calibration component (low confidence)", low)
    for p in (out, calib_path):
        run.add_output(p)
    run.write(_sidecar(out, "_manifest.json"))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        records = read_scores(args.scores)
    except OSError as exc:
        raise InputError(f"cannot read scores {args.scores}: {exc}") from exc
    recon_dir = Path(args.recon) if args.recon else None
    inputs, recons = {}, {}
    if recon_dir is not None:
        for r in records:
            path = recon_dir / _recon_name(r.image_id)
            if path.exists():
                with np.load(path) as z:
                    inputs[r.image_id], recons[r.image_id] = z["input"], z["reconstruction"]
    report = build_report(records, recons, inputs, args.threshold)
    out = Path(args.out)
    run = _manifest("eval", args, None, {"scores": str(args.scores), "recon": str(args.recon)})
    for p in write_report(report, records, out, plots=not args.no_plots):
        run.add_output(p)
    run.write(out / "run_manifest.json")
    o = report.overall
    log.info("overall: accuracy %.4f, AUROC %s", o.accuracy, "n/a" if o.auroc is None else f"{o.auroc:.4f}")
    return EXIT_OK


def ablation_split(data: ImageSet, seed: int, holdout: float = 0.2) -> tuple[list[np.ndarray], EvalSet]:
    """Training images and evaluation set for the ablation.

    A fraction of the Normal images is held out. When the data carries
    non-Normal categories they form the OOD side; otherwise OOD images are
    synthesized from a second held-out share with the evaluation noise kinds.
    """
    normal = [i for i, c in enumerate(data.categories) if is_normal(c)]
    other = [i for i, c in enumerate(data.categories) if not is_normal(c)]
    rng = np.random.default_rng([seed, 2])
    order = [normal[i] for i in rng.permutation(len(normal))]
    n_eval = max(2, int(round(holdout * len(order))))
    if other:
        if len(order) - n_eval < 1:
            raise InputError("too few Normal images for an ablation split")
        held, train_idx = order[:n_eval], order[n_eval:]
        keep = held + other
        evalset = EvalSet([data.image_ids[i] for i in keep], [data.images[i] for i in keep],
                          [data.categories[i] for i in keep])
        return [data.images[i] for i in train_idx], evalset
    if len(order) - 2 * n_eval < 1:
        raise InputError("too few Normal images for an ablation split")
    held, sources, train_idx = order[:n_eval], order[n_eval:2 * n_eval], order[2 * n_eval:]
    evalset = make_eval_set([data.images[i] for i in held], [data.images[i] for i in sources], rng)
    return [data.images[i] for i in train_idx], evalset


ABLATION_COLUMNS = ("variant", "seed", "auroc", "accuracy")


def cmd_ablation(args) -> int:
    cfg = load_config(args.config)
    data = load_image_dir(args.data, cfg.model.input_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _manifest("ablation", args, cfg, {"data": str(args.data)})
    seeds = cfg.ablation_seeds
    if os.environ.get(SEED_ENV, "").strip():
        seeds = tuple(cfg.train.master_seed + k for k in range(len(seeds)))
    rows, categories = [], []
    for seed in seeds:
        train_images, eval_set = ablation_split(data, seed)
        for variant in Variant:
            t0 = time.perf_counter()
            res = run_experiment(train_images, eval_set, replace(cfg.train, master_seed=seed), cfg.model,
                                 variant, cfg.synth)
            preds = [int(r.anomaly_score >= cfg.threshold) for r in res.records]
            labels = [category_label(r.category) for r in res.records]
            acc = float(np.mean(np.asarray(preds) == np.asarray(labels)))
            for c in res.category_auroc:
                if c not in categories:
                    categories.append(c)
            rows.append((variant.value, seed, res.auroc, acc, res.category_auroc))
            log.info("%s seed %d: AUROC %.4f (%.1f s)", variant.value, seed, res.auroc, time.perf_counter() - t0)
    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS + tuple(f"auroc_{c}" for c in categories))
        for variant, seed, auc, acc, per_cat in rows:
            w.writerow([variant, seed, repr(auc), repr(acc)] + [repr(per_cat[c]) if c in per_cat else "" for c in categories])
    summary = out / "ablation_summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "n_seeds", "mean_auroc", "mean_accuracy"))
        for variant in Variant:
            mine = [r for r in rows if r[0] == variant.value]
            w.writerow([variant.value, len(mine), repr(float(np.mean([r[2] for r in mine]))),
                        repr(float(np.mean([r[3] for r in mine])))])
    run.add_output(table)
    run.add_output(summary)
    run.write(out / "run_manifest.json")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hand", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="crop, stitch and normalize raw images")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--meta", required=True, help="metadata CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on the Normal images of a data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score images with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="scores CSV")
    p.add_argument("--calib", default="batch", help="'batch' or 'frozen:FILE'")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="per-category metrics, tables and plots")
    p.add_argument("--scores", required=True)
    p.add_argument("--recon", help="reconstruction directory written by 'score'")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="recon-only vs +discriminator vs full model over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except CheckpointVersionError as exc:
        log.error("%s", exc)
        return EXIT_VERSION
    except (InputError, ConfigError, PreprocessError, TrainingError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
