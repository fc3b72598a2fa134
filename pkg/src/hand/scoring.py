"""Anomaly score: equal-weight sum of min-max normalized reconstruction error
and discriminator probability, plus thresholded classification."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import HAND

DEFAULT_THRESHOLD = 0.5
SCORE_COLUMNS = ("image_id", "recon_error", "ood_probability", "S", "category", "predicted_label")


class Label(enum.IntEnum):
    ID = 0
    OOD = 1


@dataclass(frozen=True)
class ScoreCalibration:
    recon_min: float
    recon_max: float
    prob_min: float
    prob_max: float
    source: str = ""

    def __post_init__(self):
        if self.recon_min > self.recon_max or self.prob_min > self.prob_max:
            raise ValueError("calibration bounds must satisfy min <= max")

    @property
    def recon_degenerate(self) -> bool:
        return self.recon_max == self.recon_min

    @property
    def prob_degenerate(self) -> bool:
        return self.prob_max == self.prob_min

    @property
    def degenerate(self) -> bool:
        return self.recon_degenerate or self.prob_degenerate

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "ScoreCalibration":
        data = json.loads(Path(path).read_text())
        return cls(**{k: data[k] for k in ("recon_min", "recon_max", "prob_min", "prob_max")},
                   source=data.get("source", ""))


@dataclass
class ScoredRecord:
    image_id: str
    recon_error: float
    ood_probability: float
    anomaly_score: float
    category: str = "normal"
    low_confidence: bool = False


def calibrate(records: Sequence[tuple[float, float]], source: str = "") -> ScoreCalibration:
    """Component-wise min/max over (recon_error, ood_probability) pairs."""
    if len(records) < 2:
        raise ValueError("calibration needs at least two records")
    arr = np.asarray(records, dtype=np.float64)
    return ScoreCalibration(
        recon_min=float(arr[:, 0].min()),
        recon_max=float(arr[:, 0].max()),
        prob_min=float(arr[:, 1].min()),
        prob_max=float(arr[:, 1].max()),
        source=source,
    )


def _normalized(value: float, lo: float, hi: float) -> float:
    if hi == lo:
        return 0.0
    return (min(max(value, lo), hi) - lo) / (hi - lo)


def score_with_flag(
    recon_error: float,
    ood_probability: float,
    calibration: ScoreCalibration,
    use_probability: bool = True,
) -> tuple[float, bool]:
    """Return ``(S, low_confidence)``.

    Inputs outside the calibration range are clamped, so S is always in [0, 1].
    A degenerate component contributes 0 and raises the low-confidence flag.
    With ``use_probability=False`` the score is the normalized reconstruction
    error alone (for models trained without a discriminator).
    """
    r = _normalized(recon_error, calibration.recon_min, calibration.recon_max)
    if not use_probability:
        return r, calibration.recon_degenerate
    p = _normalized(ood_probability, calibration.prob_min, calibration.prob_max)
    return 0.5 * r + 0.5 * p, calibration.degenerate


def score(recon_error: float, ood_probability: float, calibration: ScoreCalibration,
          use_probability: bool = True) -> float:
    return score_with_flag(recon_error, ood_probability, calibration, use_probability)[0]


def classify(s: float, threshold: float = DEFAULT_THRESHOLD) -> Label:
    """OOD iff ``s >= threshold`` (ties go to OOD)."""
    return Label.OOD if s >= threshold else Label.ID


# ---------------------------------------------------------------- inference


@torch.no_grad()
def infer(model: HAND, images: Sequence[np.ndarray], batch_size: int = 32):
    """Per-image reconstruction MSE, OOD probability and reconstruction."""
    model.eval()
    dtype = next(model.parameters()).dtype
    errors, probs, recons = [], [], []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([np.asarray(img) for img in images[start:start + batch_size]])
        x = torch.as_tensor(chunk, dtype=dtype).unsqueeze(1)
        out = model(x)
        err = ((out.reconstruction - x) ** 2).flatten(1).mean(dim=1)
        errors.extend(err.double().tolist())
        probs.extend(out.ood_probability.double().tolist())
        recons.extend(out.reconstruction[:, 0].double().numpy())
    return errors, probs, recons


def score_records(
    image_ids: Sequence[str],
    recon_errors: Sequence[float],
    probabilities: Sequence[float],
    categories: Sequence[str],
    calibration: ScoreCalibration | None = None,
    use_probability: bool = True,
) -> tuple[list[ScoredRecord], ScoreCalibration]:
    """Score a set of images. Without a frozen calibration the set calibrates itself."""
    if calibration is None:
        calibration = calibrate(list(zip(recon_errors, probabilities)), source="batch")
    records = []
    for iid, r, p, c in zip(image_ids, recon_errors, probabilities, categories):
        s, low = score_with_flag(r, p, calibration, use_probability)
        records.append(ScoredRecord(iid, float(r), float(p), s, c, low))
    return records, calibration


def write_scores(path: str | Path, records: Iterable[ScoredRecord], threshold: float = DEFAULT_THRESHOLD) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in records:
            w.writerow([r.image_id, repr(r.recon_error), repr(r.ood_probability), repr(r.anomaly_score),
                        r.category, int(classify(r.anomaly_score, threshold))])


def read_scores(path: str | Path) -> list[ScoredRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SCORE_COLUMNS[:5] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        return [
            ScoredRecord(row["image_id"], float(row["recon_error"]), float(row["ood_probability"]),
                         float(row["S"]), row["category"])
            for row in reader
        ]
