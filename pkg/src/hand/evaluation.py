"""Evaluation metrics, evaluation-set noise and per-category reports."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import correlate1d, map_coordinates, zoom
from scipy.stats import rankdata
from skimage.transform import resize

from .preprocess import resize_bilinear
from .scoring import DEFAULT_THRESHOLD, ScoredRecord, classify
from .synth_ood import load_textures

REPORT_COLUMNS = ("category", "n", "accuracy", "auroc", "mean_ssim")
OVERALL = "overall"


class EvalCategory(str, enum.Enum):
    NORMAL = "normal"
    IMPLANT = "implant"
    SALT_PEPPER = "salt_pepper"
    DISTORTION = "distortion"
    GAUSSIAN = "gaussian"
    POOR_QUALITY = "poor_quality"
    NATURAL = "natural"
    BIOPSY_CLIP = "biopsy_clip"


def is_normal(category: str) -> bool:
    return category.strip().lower() == EvalCategory.NORMAL.value


def category_label(category: str) -> int:
    """Ground truth: 0 for Normal, 1 for every other category (custom ones included)."""
    return 0 if is_normal(category) else 1


class NoiseKind(str, enum.Enum):
    SALT_PEPPER = "salt_pepper"
    DISTORTION = "distortion"
    GAUSSIAN = "gaussian"
    POOR_QUALITY = "poor_quality"


@dataclass(frozen=True)
class NoiseConfig:
    salt_pepper_fraction: float = 0.1
    gaussian_sigma: float = 0.1
    warp_amplitude: float = 8.0
    warp_grid: int = 4
    poor_quality_factor: int = 4


# ------------------------------------------------------------------- SSIM


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
             data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully contained Gaussian-weighted window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"SSIM needs 2-D images of at least {window}x{window}, got {a.shape}")
    w = _gaussian_window(window, sigma)
    half = window // 2

    def filt(img):
        out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
        return out[half:img.shape[0] - half, half:img.shape[1] - half]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, **kwargs) -> float:
    """Mean structural similarity (11x11 Gaussian window, sigma 1.5, L = 1)."""
    return float(ssim_map(a, b, **kwargs).mean())


# --------------------------------------------------------- classification


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUROC: P(random positive outscores random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be binary (0/1)")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined unless both classes are present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]):
    """(fpr, tpr, thresholds) for the rule ``score >= threshold``, thresholds descending.

    The first point is (0, 0) at threshold +inf.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    thresholds = np.concatenate([[np.inf], np.unique(s)[::-1]])
    n_pos, n_neg = (y == 1).sum(), (y == 0).sum()
    tpr = np.array([((s >= t) & (y == 1)).sum() / n_pos for t in thresholds])
    fpr = np.array([((s >= t) & (y == 0)).sum() / n_neg for t in thresholds])
    return fpr, tpr, thresholds


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    return float((p == y).mean())


# ------------------------------------------------------------- eval noise


def smooth_warp(image: np.ndarray, rng: np.random.Generator, amplitude: float, grid: int = 4) -> np.ndarray:
    """Displace pixels by a smooth random field with peak magnitude ``amplitude`` pixels."""
    h, w = image.shape
    fields = []
    for _ in range(2):
        coarse = rng.uniform(-1.0, 1.0, size=(grid, grid))
        fields.append(zoom(coarse, (h / grid, w / grid), order=3, mode="nearest")[:h, :w])
    peak = max(np.abs(fields[0]).max(), np.abs(fields[1]).max(), 1e-12)
    dy, dx = (f * amplitude / peak for f in fields)
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    return map_coordinates(image, [yy + dy, xx + dx], order=1, mode="reflect")


def make_eval_noise(
    image: np.ndarray,
    kind: NoiseKind | str,
    rng: np.random.Generator,
    cfg: NoiseConfig = NoiseConfig(),
) -> np.ndarray:
    """Corrupt an image for the evaluation set; result clamped to [0, 1]."""
    kind = NoiseKind(kind)
    img = np.asarray(image, dtype=np.float64)
    if kind is NoiseKind.SALT_PEPPER:
        out = img.copy()
        hit = rng.random(img.shape) < cfg.salt_pepper_fraction
        out[hit] = (rng.random(int(hit.sum())) < 0.5).astype(np.float64)
    elif kind is NoiseKind.GAUSSIAN:
        out = img + rng.normal(0.0, cfg.gaussian_sigma, size=img.shape) if cfg.gaussian_sigma > 0 else img.copy()
    elif kind is NoiseKind.DISTORTION:
        out = smooth_warp(img, rng, cfg.warp_amplitude, cfg.warp_grid)
    elif kind is NoiseKind.POOR_QUALITY:
        f = cfg.poor_quality_factor
        small = resize(img, (max(1, img.shape[0] // f), max(1, img.shape[1] // f)), order=1,
                       anti_aliasing=True, preserve_range=True)
        out = resize_bilinear(small, img.shape)
    return np.clip(out, 0.0, 1.0)


def natural_image(rng: np.random.Generator, size: int, texture_dir: str | None = None) -> np.ndarray:
    """A random crop of a bundled natural texture, min-max scaled to [0, 1]."""
    textures = load_textures(texture_dir)
    tex = textures[int(rng.integers(len(textures)))]
    crop = int(rng.integers(tex.shape[0] // 2, tex.shape[0] + 1))
    y = int(rng.integers(tex.shape[0] - crop + 1))
    x = int(rng.integers(tex.shape[1] - crop + 1))
    img = resize_bilinear(tex[y:y + crop, x:x + crop], (size, size))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


# ----------------------------------------------------------------- report


@dataclass
class CategoryMetrics:
    category: str
    n: int
    accuracy: float
    auroc: float | None
    mean_ssim: float | None


@dataclass
class MetricReport:
    rows: list[CategoryMetrics]
    threshold: float = DEFAULT_THRESHOLD
    ssim_values: dict[str, list[float]] = field(default_factory=dict)

    def row(self, category: str) -> CategoryMetrics:
        for r in self.rows:
            if r.category == category:
                return r
        raise KeyError(category)

    @property
    def overall(self) -> CategoryMetrics:
        return self.row(OVERALL)


def build_report(
    records: Sequence[ScoredRecord],
    reconstructions: Mapping[str, np.ndarray] | None = None,
    inputs: Mapping[str, np.ndarray] | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> MetricReport:
    """Per-category metrics against Normal, plus a pooled ``overall`` row.

    Category rows are ordered Normal first, then by first appearance. The
    Normal row carries accuracy and SSIM only; AUROC needs both classes.
    """
    categories = list(dict.fromkeys(r.category for r in records))
    normal = [c for c in categories if is_normal(c)]
    if not normal:
        raise ValueError("records must include the Normal category")
    if len(categories) < 2:
        raise ValueError("records must cover at least two categories")
    categories = normal + [c for c in categories if not is_normal(c)]

    ssim_values: dict[str, list[float]] = {}
    if reconstructions is not None and inputs is not None:
        for r in records:
            if r.image_id in reconstructions and r.image_id in inputs:
                ssim_values.setdefault(r.category, []).append(ssim(inputs[r.image_id], reconstructions[r.image_id]))

    def metrics(name: str, subset: Sequence[ScoredRecord], ssim_cats: Sequence[str]) -> CategoryMetrics:
        labels = [category_label(r.category) for r in subset]
        preds = [int(classify(r.anomaly_score, threshold)) for r in subset]
        both = 0 < sum(labels) < len(labels)
        vals = [v for c in ssim_cats for v in ssim_values.get(c, [])]
        return CategoryMetrics(
            category=name,
            n=len(subset) if name == OVERALL or is_normal(name) else sum(labels),
            accuracy=accuracy(preds, labels),
            auroc=auroc([r.anomaly_score for r in subset], labels) if both else None,
            mean_ssim=float(np.mean(vals)) if vals else None,
        )

    normal_records = [r for r in records if is_normal(r.category)]
    rows = [metrics(normal[0], normal_records, normal)]
    for c in categories[len(normal):]:
        rows.append(metrics(c, normal_records + [r for r in records if r.category == c], [c]))
    rows.append(metrics(OVERALL, list(records), categories))
    return MetricReport(rows, threshold, ssim_values)


def _fmt(v):
    return "" if v is None else repr(v)


def write_report(report: MetricReport, records: Sequence[ScoredRecord], out_dir: str | Path,
                 plots: bool = True) -> list[Path]:
    """Write ``metrics.csv``, ``summary.json`` and (optionally) the two plot files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    table = out_dir / "metrics.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([r.category, r.n, _fmt(r.accuracy), _fmt(r.auroc), _fmt(r.mean_ssim)])
    written.append(table)
    summary = out_dir / "summary.json"
    summary.write_text(json.dumps(
        {"threshold": report.threshold, "rows": [asdict(r) for r in report.rows]}, indent=2) + "\n")
    written.append(summary)
    if plots:
        written += _write_plots(report, records, out_dir)
    return written


def _write_plots(report: MetricReport, records: Sequence[ScoredRecord], out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    if report.ssim_values:
        cats = [r.category for r in report.rows if r.category in report.ssim_values]
        fig, ax = plt.subplots(figsize=(1.2 * len(cats) + 2, 4))
        ax.boxplot([report.ssim_values[c] for c in cats])
        ax.set_xticks(range(1, len(cats) + 1), cats, rotation=30)
        ax.set_ylabel("SSIM")
        fig.tight_layout()
        p = out_dir / "ssim_boxplot.png"
        fig.savefig(p, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)

    fig, ax = plt.subplots(figsize=(5, 5))
    normal_records = [r for r in records if is_normal(r.category)]
    for row in report.rows:
        if row.auroc is None:
            continue
        subset = records if row.category == OVERALL else normal_records + [r for r in records if r.category == row.category]
        fpr, tpr, _ = roc_curve([r.anomaly_score for r in subset], [category_label(r.category) for r in subset])
        ax.plot(fpr, tpr, label=f"{row.category} ({row.auroc:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    p = out_dir / "roc_curves.png"
    fig.savefig(p, dpi=100, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)
    return paths

