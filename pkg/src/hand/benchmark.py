"""Desk-scale synthetic benchmark and ablation variants.

The in-distribution corpus is procedural: each image is a min-max scaled
sum of a few anisotropic Gaussian blobs. Evaluation OOD images are held-out
blobs corrupted with the evaluation-noise kinds, which never appear during
training.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .evaluation import NoiseConfig, NoiseKind, auroc, category_label, make_eval_noise
from .model import ModelConfig
from .preprocess import minmax
from .scoring import ScoredRecord, infer, score_records
from .synth_ood import SynthConfig
from .training import TrainConfig, TrainResult, train


class Variant(str, enum.Enum):
    RECON_ONLY = "recon_only"
    DISCRIMINATOR = "discriminator"
    HAND = "hand"


def variant_config(base: TrainConfig, variant: Variant | str) -> TrainConfig:
    """Ablation settings: reconstruction only, +discriminator, +gradient reversal (full model)."""
    variant = Variant(variant)
    if variant is Variant.RECON_ONLY:
        return replace(base, alpha2=0.0, reversal=False, exact_half_batches=False)
    if variant is Variant.DISCRIMINATOR:
        return replace(base, reversal=False)
    return base


def variant_synth(base: SynthConfig, variant: Variant | str) -> SynthConfig:
    """The reconstruction-only baseline sees plain ID images, no synthetic OOD."""
    if Variant(variant) is Variant.RECON_ONLY:
        return replace(base, ood_probability=0.0, exact_half_batches=False)
    return base


def uses_discriminator(config: TrainConfig) -> bool:
    return config.alpha2 > 0


def blob_image(
    rng: np.random.Generator,
    size: int,
    n_blobs: tuple[int, int] = (3, 6),
    sigma: tuple[float, float] = (0.06, 0.16),
    isotropic: bool = False,
) -> np.ndarray:
    """Min-max scaled sum of Gaussian blobs; ``sigma`` is a fraction of ``size``.

    With ``isotropic`` every blob is round, so geometric warps leave a visible trace.
    """
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(n_blobs[0], n_blobs[1] + 1))):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * size
        sy, sx = rng.uniform(*sigma, size=2) * size
        if isotropic:
            sx = sy
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = c * (yy - cy) + s * (xx - cx)
        v = -s * (yy - cy) + c * (xx - cx)
        img += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((u / sy) ** 2 + (v / sx) ** 2))
    return minmax(img)


def blob_corpus(n: int, size: int, seed: int, **kwargs) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [blob_image(rng, size, **kwargs) for _ in range(n)]


@dataclass(frozen=True)
class BenchmarkConfig:
    image_size: int = 64
    n_train: int = 512
    n_eval_id: int = 128
    n_eval_ood: int = 128
    epochs: int = 5
    batch_size: int = 4
    learning_rate: float = 1e-3
    alpha1: float = 1.0
    alpha2: float = 1.0
    lambda_: float = 0.5
    n_blobs: tuple[int, int] = (20, 40)
    blob_sigma: tuple[float, float] = (0.02, 0.025)
    isotropic_blobs: bool = True
    exact_half_batches: bool = True
    noise: NoiseConfig = NoiseConfig()
    noise_kinds: tuple[NoiseKind, ...] = tuple(NoiseKind)

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_size=self.image_size)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lambda_=self.lambda_,
            master_seed=seed,
            exact_half_batches=self.exact_half_batches,
        )


@dataclass
class EvalSet:
    image_ids: list[str]
    images: list[np.ndarray]
    categories: list[str]


def make_eval_set(
    id_images: Sequence[np.ndarray],
    ood_sources: Sequence[np.ndarray],
    rng: np.random.Generator,
    kinds: Sequence[NoiseKind] = tuple(NoiseKind),
    noise: NoiseConfig = NoiseConfig(),
) -> EvalSet:
    """Normal images plus OOD images cycling through ``kinds``."""
    ids, images, cats = [], [], []
    for i, img in enumerate(id_images):
        ids.append(f"id_{i:04d}")
        images.append(np.asarray(img, dtype=np.float64))
        cats.append("normal")
    for i, img in enumerate(ood_sources):
        kind = NoiseKind(kinds[i % len(kinds)])
        ids.append(f"ood_{i:04d}_{kind.value}")
        images.append(make_eval_noise(img, kind, rng, noise))
        cats.append(kind.value)
    return EvalSet(ids, images, cats)


@dataclass
class BenchmarkResult:
    seed: int
    variant: Variant
    auroc: float
    category_auroc: dict[str, float]
    records: list[ScoredRecord]
    train_result: TrainResult
    seconds: float = 0.0
    reconstructions: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: dict[str, np.ndarray] = field(default_factory=dict)


def score_eval_set(result: TrainResult, eval_set: EvalSet, use_probability: bool):
    errors, probs, recons = infer(result.model, eval_set.images)
    records, calibration = score_records(
        eval_set.image_ids, errors, probs, eval_set.categories, use_probability=use_probability
    )
    return records, calibration, recons


def category_aurocs(records: Sequence[ScoredRecord]) -> dict[str, float]:
    normal = [r for r in records if category_label(r.category) == 0]
    out = {}
    for c in dict.fromkeys(r.category for r in records):
        if category_label(c) == 0:
            continue
        subset = normal + [r for r in records if r.category == c]
        out[c] = auroc([r.anomaly_score for r in subset], [category_label(r.category) for r in subset])
    return out


def run_experiment(
    train_images: Sequence[np.ndarray],
    eval_set: EvalSet,
    train_config: TrainConfig,
    model_config: ModelConfig,
    variant: Variant | str = Variant.HAND,
    synth_config: SynthConfig = SynthConfig(),
) -> BenchmarkResult:
    variant = Variant(variant)
    cfg = variant_config(train_config, variant)
    t0 = time.perf_counter()
    result = train(train_images, cfg, model_config, variant_synth(synth_config, variant))
    records, _, recons = score_eval_set(result, eval_set, uses_discriminator(cfg))
    seconds = time.perf_counter() - t0
    return BenchmarkResult(
        seed=cfg.master_seed,
        variant=variant,
        auroc=auroc([r.anomaly_score for r in records], [category_label(r.category) for r in records]),
        category_auroc=category_aurocs(records),
        records=records,
        train_result=result,
        seconds=seconds,
        reconstructions=dict(zip(eval_set.image_ids, recons)),
        inputs=dict(zip(eval_set.image_ids, eval_set.images)),
    )


def benchmark_data(seed: int, cfg: BenchmarkConfig = BenchmarkConfig()):
    """Training corpus and evaluation set for one seed."""
    n = cfg.n_train + cfg.n_eval_id + cfg.n_eval_ood
    corpus = blob_corpus(n, cfg.image_size, seed, n_blobs=cfg.n_blobs, sigma=cfg.blob_sigma,
                         isotropic=cfg.isotropic_blobs)
    train_images = corpus[: cfg.n_train]
    held_id = corpus[cfg.n_train: cfg.n_train + cfg.n_eval_id]
    held_ood = corpus[cfg.n_train + cfg.n_eval_id:]
    rng = np.random.default_rng([seed, 1])
    return train_images, make_eval_set(held_id, held_ood, rng, cfg.noise_kinds, cfg.noise)


def run_benchmark(seed: int, variant: Variant | str = Variant.HAND,
                  cfg: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkResult:
    train_images, eval_set = benchmark_data(seed, cfg)
    return run_experiment(train_images, eval_set, cfg.train_config(seed), cfg.model_config(), variant)
