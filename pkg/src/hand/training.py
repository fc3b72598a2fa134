"""Two-update self-supervised training.

Each batch mixes untouched ID images (label 0) with synthetic OOD copies
(label 1) and updates the network twice:

1. ``L1 = alpha1 * MSE(ID inputs, ID reconstructions) + alpha2 * BCE(labels, p_ood)``
   updates every parameter.
2. ``L2 = MSE(OOD inputs, OOD reconstructions)`` is backpropagated through a
   gradient-reversal element placed right after the decoder output, so the
   encoder, transformer and decoder move *up* the OOD reconstruction error.
   The discriminator head is not on this path and never changes here.

Both updates go through one optimizer, so ``lambda`` sets the strength of
the reversed step relative to the first one. Before the second backward pass
all gradients are reset to ``None``; parameters that receive no gradient
(the discriminator) are therefore skipped by the optimizer. With
``lambda == 0`` the reversed gradient is identically zero and no second
update is taken.
"""

from __future__ import annotations

import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import build_checkpoint
from .model import HAND, ModelConfig, grad_reverse
from .synth_ood import SynthConfig, SyntheticSample, make_training_batch

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
METRIC_COLUMNS = ("epoch", "loss_l1", "loss_recon_id", "loss_disc", "loss_l2_ood")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, step: int, losses: dict[str, float]):
        detail = ", ".join(f"{k}={v}" for k, v in losses.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 1.0
    alpha2: float = 0.5
    lambda_: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    master_seed: int = 0
    exact_half_batches: bool = False
    reversal: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha1 + self.alpha2 <= 0:
            raise ValueError("alpha1 and alpha2 must be non-negative with a positive sum")
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lambda_}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class StepReport:
    step_index: int
    loss_l1: float
    loss_recon_id: float
    loss_disc: float
    loss_l2_ood: float
    ood_fraction: float


def make_optimizer(model: HAND, config: TrainConfig) -> torch.optim.Optimizer:
    opt = torch.optim.Adam if config.optimizer == "adam" else torch.optim.SGD
    return opt(model.parameters(), lr=config.learning_rate)


# ------------------------------------------------------------------ losses


def loss_recon(x, x_recon):
    """Mean squared pixel difference. Works on tensors and array-likes."""
    if isinstance(x, torch.Tensor) or isinstance(x_recon, torch.Tensor):
        if x.shape != x_recon.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_recon.shape)}")
        return F.mse_loss(x_recon, x)
    a, b = np.asarray(x, dtype=np.float64), np.asarray(x_recon, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def loss_disc(y, y_pred):
    """Binary cross-entropy, batch mean, with ``y_pred`` clamped to [eps, 1 - eps]."""
    if isinstance(y_pred, torch.Tensor):
        y = torch.as_tensor(y, dtype=y_pred.dtype)
        p = y_pred.clamp(BCE_EPS, 1 - BCE_EPS)
        return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(y_pred, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


# -------------------------------------------------------------------- steps


def batch_tensors(batch: Sequence[SyntheticSample], dtype=torch.float32):
    x = torch.as_tensor(np.stack([s.image for s in batch]), dtype=dtype).unsqueeze(1)
    y = torch.as_tensor([s.label for s in batch], dtype=dtype)
    return x, y


def _param_dtype(model: HAND):
    return next(model.parameters()).dtype


def joint_update(model: HAND, optimizer: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor,
                 config: TrainConfig, step_index: int = 0):
    """Update (a): ``alpha1 * MSE over ID samples + alpha2 * BCE over all samples``."""
    is_id = y == 0
    optimizer.zero_grad(set_to_none=True)
    out = model(x)
    recon_id = loss_recon(x[is_id], out.reconstruction[is_id])
    disc = loss_disc(y, out.ood_probability)
    l1 = config.alpha1 * recon_id + config.alpha2 * disc
    _check_finite(step_index, loss_l1=l1, loss_recon_id=recon_id, loss_disc=disc)
    l1.backward()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return float(l1.detach()), float(recon_id.detach()), float(disc.detach())


@contextmanager
def frozen_norm_statistics(model: torch.nn.Module):
    """Keep batch-norm running statistics fixed while still normalising with batch statistics."""
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, momentum in zip(norms, saved):
            m.momentum = momentum


def reversal_update(model: HAND, optimizer: torch.optim.Optimizer, x_ood: torch.Tensor,
                    config: TrainConfig, step_index: int = 0) -> float:
    """Update (b): OOD reconstruction loss through gradient reversal. Returns L2 before the update.

    Skips the optimizer step when reversal is disabled or ``lambda == 0``. The
    OOD-only forward pass does not touch batch-norm running statistics, which
    should describe the in-distribution data seen at inference.
    """
    optimizer.zero_grad(set_to_none=True)
    if not (config.reversal and config.lambda_ > 0):
        with torch.no_grad(), frozen_norm_statistics(model):
            l2 = loss_recon(x_ood, model.decode(model.latent(x_ood)))
        _check_finite(step_index, loss_l2_ood=l2)
        return float(l2)
    with frozen_norm_statistics(model):
        recon = grad_reverse(model.decode(model.latent(x_ood)), config.lambda_)
    l2 = loss_recon(x_ood, recon)
    _check_finite(step_index, loss_l2_ood=l2)
    l2.backward()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return float(l2.detach())


def train_step(
    batch: Sequence[SyntheticSample],
    model: HAND,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    step_index: int = 0,
) -> StepReport:
    x, y = batch_tensors(batch, _param_dtype(model))
    is_id = y == 0
    if not bool(is_id.any()):
        raise TrainingError(f"step {step_index}: batch has no ID samples, reconstruction loss undefined")
    model.train()
    l1, recon_id, disc = joint_update(model, optimizer, x, y, config, step_index)
    x_ood = x[~is_id]
    l2 = reversal_update(model, optimizer, x_ood, config, step_index) if len(x_ood) else 0.0
    return StepReport(
        step_index=step_index,
        loss_l1=l1,
        loss_recon_id=recon_id,
        loss_disc=disc,
        loss_l2_ood=l2,
        ood_fraction=float(len(x_ood)) / len(batch),
    )


def _check_finite(step: int, **losses: torch.Tensor) -> None:
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(step, values)


# -------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: HAND
    checkpoint: dict
    epoch_reports: list[StepReport]
    skipped_batches: int = 0


CheckpointSink = Callable[[dict, int], None]


def mean_report(reports: Sequence[StepReport], index: int) -> StepReport:
    cols = ("loss_l1", "loss_recon_id", "loss_disc", "loss_l2_ood", "ood_fraction")
    return StepReport(index, *(float(np.mean([getattr(r, c) for r in reports])) for c in cols))


def train(
    dataset: Sequence[np.ndarray],
    config: TrainConfig,
    model_config: ModelConfig = ModelConfig(),
    synth_config: SynthConfig = SynthConfig(),
    checkpoint_sink: CheckpointSink | None = None,
    metrics_csv: str | Path | None = None,
) -> TrainResult:
    """Train from scratch. Deterministic for a fixed ``master_seed`` in one process.

    ``checkpoint_sink(checkpoint, epoch)`` is called after every epoch, and
    with epoch 0 for the initialization when ``config.epochs == 0``.
    """
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    if config.exact_half_batches != synth_config.exact_half_batches:
        synth_config = _replace_synth(synth_config, exact_half_batches=config.exact_half_batches)
    images = [np.asarray(img, dtype=np.float64) for img in dataset]
    size = model_config.input_size
    for i, img in enumerate(images):
        if img.shape != (size, size):
            raise TrainingError(f"image {i} has shape {img.shape}, model expects {(size, size)}")

    cfg_snapshot = {f.name: getattr(config, f.name) for f in fields(config)}
    rng = np.random.default_rng(config.master_seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.master_seed)
        model = HAND(model_config, seed=config.master_seed)
        optimizer = make_optimizer(model, config)
        reports: list[StepReport] = []
        step = 0
        skipped = 0
        if config.epochs == 0:
            ckpt = build_checkpoint(model, 0, config.master_seed, cfg_snapshot)
            if checkpoint_sink:
                checkpoint_sink(ckpt, 0)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(images))
            step_reports = []
            for start in range(0, len(order), config.batch_size):
                batch = make_training_batch([images[i] for i in order[start:start + config.batch_size]], rng, synth_config)
                if all(s.label == 1 for s in batch):
                    skipped += 1
                    logger.warning("epoch %d: skipping batch without ID samples", epoch)
                    continue
                step_reports.append(train_step(batch, model, optimizer, config, step))
                step += 1
            if step_reports:
                report = mean_report(step_reports, epoch)
                reports.append(report)
                logger.info(
                    "epoch %d  L1 %.5f  recon_id %.5f  disc %.5f  L2_ood %.5f",
                    epoch, report.loss_l1, report.loss_recon_id, report.loss_disc, report.loss_l2_ood,
                )
                if metrics_csv is not None:
                    append_metrics(metrics_csv, report)
            ckpt = build_checkpoint(model, step, config.master_seed, cfg_snapshot)
            if checkpoint_sink:
                checkpoint_sink(ckpt, epoch)
    model.eval()
    return TrainResult(model, ckpt, reports, skipped)


def _replace_synth(cfg: SynthConfig, **changes) -> SynthConfig:
    return SynthConfig(**{**asdict(cfg), **changes})


def append_metrics(path: str | Path, report: StepReport) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerow([report.step_index] + [repr(getattr(report, c)) for c in METRIC_COLUMNS[1:]])
