"""Mammogram preprocessing: dedupe, invert, crop, stitch and normalize.

Raw per-view records become canonical 256x256 single-channel images with
intensities in [0, 1]. The on-disk pipeline (`run_pipeline`) reads grayscale
PNGs plus a metadata CSV and writes 16-bit PNGs plus a manifest CSV.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from skimage.transform import resize

logger = logging.getLogger(__name__)

CANONICAL_SIZE = 256
DEFAULT_CROP_THRESHOLD = 0.05
LATERALITIES = ("Left", "Right")
VIEWS = ("MLO", "CC")
METADATA_COLUMNS = (
    "image_id",
    "study_id",
    "laterality",
    "view",
    "acquisition_time",
    "photometric_inverted",
)
MANIFEST_COLUMNS = (
    "image_id",
    "study_id",
    "view",
    "right_source",
    "left_source",
    "category",
    "provenance",
    "sha256",
)


class PreprocessError(ValueError):
    """Raised for malformed inputs to the preprocessing pipeline."""


class PairingError(PreprocessError):
    """Raised when two views cannot be stitched together."""


@dataclass(frozen=True)
class RawImageRecord:
    image_id: str
    pixels: np.ndarray
    laterality: str
    view: str
    study_id: str
    acquisition_time: datetime
    photometric_inverted: bool = False
    category: str = ""

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2 or pixels.shape[0] < 16 or pixels.shape[1] < 16:
            raise PreprocessError(
                f"{self.image_id}: pixels must be a 2-D grid of at least 16x16, got {pixels.shape}"
            )
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0:
            raise PreprocessError(f"{self.image_id}: intensities must be finite and non-negative")
        if self.laterality not in LATERALITIES:
            raise PreprocessError(f"{self.image_id}: unknown laterality {self.laterality!r}")
        if self.view not in VIEWS:
            raise PreprocessError(f"{self.image_id}: unknown view {self.view!r}")
        object.__setattr__(self, "pixels", pixels)


@dataclass
class CanonicalImage:
    pixels: np.ndarray
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise PreprocessError(f"canonical image must be 2-D, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise PreprocessError("canonical image intensities must lie in [0, 1]")


def _key(record: RawImageRecord) -> tuple[str, str, str]:
    return (record.study_id, record.laterality, record.view)


def dedupe_latest(records: Sequence[RawImageRecord]) -> list[RawImageRecord]:
    """Keep only the most recently acquired record per (study, laterality, view).

    Survivors keep their original relative order. On equal acquisition times
    the first record wins.
    """
    latest: dict[tuple[str, str, str], int] = {}
    for i, rec in enumerate(records):
        k = _key(rec)
        if k not in latest or rec.acquisition_time > records[latest[k]].acquisition_time:
            latest[k] = i
    keep = set(latest.values())
    return [rec for i, rec in enumerate(records) if i in keep]


def maybe_invert(record: RawImageRecord) -> RawImageRecord:
    if not record.photometric_inverted:
        return record
    pixels = record.pixels.max() - record.pixels
    return replace(record, pixels=pixels, photometric_inverted=False)


def crop_tissue(image: np.ndarray, threshold_fraction: float = DEFAULT_CROP_THRESHOLD) -> np.ndarray:
    """Crop to the bounding box of pixels brighter than ``threshold_fraction * max``.

    Returns the full grid when nothing qualifies (e.g. an all-zero image).
    """
    image = np.asarray(image)
    if image.size == 0:
        raise PreprocessError("cannot crop an empty grid")
    if not 0.0 <= threshold_fraction <= 1.0:
        raise PreprocessError(f"threshold_fraction must be in [0, 1], got {threshold_fraction}")
    mask = image > threshold_fraction * image.max()
    if not mask.any():
        return image
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return image[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def resize_bilinear(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape == tuple(shape):
        return image.copy()
    return resize(image, shape, order=1, mode="edge", anti_aliasing=False, preserve_range=True)


def stitch_pair(
    left: np.ndarray,
    right: np.ndarray,
    *,
    left_view: str | None = None,
    right_view: str | None = None,
    height: int = CANONICAL_SIZE,
) -> np.ndarray:
    """Place the right and left views back to back and resize to 256x256.

    Each side is first resized to ``height x height/2`` (2:1 height:width),
    the right view fills the left half and the left view the right half, so
    the chest walls meet in the middle.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.size == 0 or right.size == 0:
        raise PairingError("cannot stitch an empty grid")
    if left_view is not None and right_view is not None and left_view != right_view:
        raise PairingError(f"cannot stitch a {left_view} view with a {right_view} view")
    if height % 2:
        raise PairingError(f"composite height must be even, got {height}")
    side = (height, height // 2)
    composite = np.concatenate([resize_bilinear(right, side), resize_bilinear(left, side)], axis=1)
    return resize_bilinear(composite, (CANONICAL_SIZE, CANONICAL_SIZE))


def normalize_minmax(image: np.ndarray, provenance: Iterable[str] = ()) -> CanonicalImage:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (CANONICAL_SIZE, CANONICAL_SIZE):
        raise PreprocessError(f"normalize expects a {CANONICAL_SIZE}x{CANONICAL_SIZE} grid, got {image.shape}")
    return CanonicalImage(minmax(image), [*provenance, "normalize_minmax"])


def minmax(image: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to zeros. Any shape."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    out = (image - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def prune_intensity_outliers(images: Sequence[np.ndarray], n_sigma: float = 3.0) -> list[int]:
    """Indices of images whose mean intensity lies within mean +/- n_sigma of the corpus."""
    if not images:
        return []
    means = np.array([float(np.mean(img)) for img in images])
    mu, sigma = means.mean(), means.std()
    keep = np.abs(means - mu) <= n_sigma * sigma
    return [int(i) for i in np.flatnonzero(keep)]


@dataclass
class StitchedStudy:
    image_id: str
    study_id: str
    view: str
    right_source: str
    left_source: str
    image: CanonicalImage
    category: str = ""


def preprocess_records(
    records: Sequence[RawImageRecord],
    crop_threshold: float = DEFAULT_CROP_THRESHOLD,
    prune_sigma: float | None = None,
) -> list[StitchedStudy]:
    """Run dedupe, inversion, crop, stitch and normalization over raw records.

    Studies missing one side for a view are dropped. Output is ordered by
    (study_id, view).
    """
    by_pair: dict[tuple[str, str], dict[str, RawImageRecord]] = {}
    for rec in dedupe_latest(records):
        by_pair.setdefault((rec.study_id, rec.view), {})[rec.laterality] = rec

    out: list[StitchedStudy] = []
    for (study_id, view), sides in sorted(by_pair.items()):
        if set(sides) != set(LATERALITIES):
            logger.info("dropping %s/%s: missing partner view", study_id, view)
            continue
        right, left = maybe_invert(sides["Right"]), maybe_invert(sides["Left"])
        steps = ["dedupe_latest"]
        if sides["Right"].photometric_inverted or sides["Left"].photometric_inverted:
            steps.append("invert")
        steps.append(f"crop_tissue({crop_threshold:g})")
        steps.append("stitch_pair(right|left,2:1,bilinear)")
        stitched = stitch_pair(
            crop_tissue(left.pixels, crop_threshold),
            crop_tissue(right.pixels, crop_threshold),
            left_view=left.view,
            right_view=right.view,
        )
        category = right.category or left.category
        out.append(
            StitchedStudy(
                image_id=f"{study_id}_{view}",
                study_id=study_id,
                view=view,
                right_source=right.image_id,
                left_source=left.image_id,
                image=normalize_minmax(stitched, steps),
                category=category,
            )
        )

    if prune_sigma is not None and out:
        keep = set(prune_intensity_outliers([s.image.pixels for s in out], prune_sigma))
        for i, s in enumerate(out):
            if i not in keep:
                logger.info("pruning %s: mean intensity outlier", s.image_id)
        out = [s for i, s in enumerate(out) if i in keep]
    return out


# ---------------------------------------------------------------- file I/O


def read_grayscale(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA", "P", "LA"):
            img = img.convert("L")
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise PreprocessError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr.astype(np.float64)


def write_png16(path: str | Path, image: np.ndarray) -> None:
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(image * 65535).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")


def read_png16(path: str | Path) -> np.ndarray:
    """Read a canonical PNG back into [0, 1] floats."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        raise PreprocessError(f"{path}: expected a single-channel image")
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    return np.clip(arr.astype(np.float64) / scale, 0.0, 1.0)


def _parse_bool(text: str, row: int) -> bool:
    value = text.strip()
    if value in ("0", "false", "False", ""):
        return False
    if value in ("1", "true", "True"):
        return True
    raise PreprocessError(f"metadata row {row}: photometric_inverted must be 0 or 1, got {text!r}")


def read_metadata(metadata_csv: str | Path, in_dir: str | Path) -> list[RawImageRecord]:
    """Load the metadata table and the PNG each row points to.

    The image for row ``image_id`` is ``<in_dir>/<image_id>.png``. Row numbers
    in error messages count the header as row 1.
    """
    in_dir = Path(in_dir)
    records = []
    with open(metadata_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METADATA_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise PreprocessError(f"{metadata_csv}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            try:
                when = datetime.fromisoformat(row["acquisition_time"].strip())
            except ValueError as exc:
                raise PreprocessError(f"metadata row {row_no}: bad acquisition_time: {exc}") from None
            path = in_dir / f"{row['image_id']}.png"
            if not path.is_file():
                raise PreprocessError(f"metadata row {row_no}: image file {path} not found")
            try:
                pixels = read_grayscale(path)
            except OSError as exc:
                raise PreprocessError(f"metadata row {row_no}: cannot read {path}: {exc}") from None
            try:
                records.append(
                    RawImageRecord(
                        image_id=row["image_id"],
                        pixels=pixels,
                        laterality=row["laterality"].strip(),
                        view=row["view"].strip(),
                        study_id=row["study_id"],
                        acquisition_time=when,
                        photometric_inverted=_parse_bool(row["photometric_inverted"], row_no),
                        category=(row.get("category") or "").strip(),
                    )
                )
            except PreprocessError as exc:
                raise PreprocessError(f"metadata row {row_no}: {exc}") from None
    return records


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_pipeline(
    in_dir: str | Path,
    metadata_csv: str | Path,
    out_dir: str | Path,
    crop_threshold: float = DEFAULT_CROP_THRESHOLD,
    prune_sigma: float | None = None,
) -> Path:
    """Preprocess a directory of PNGs and write canonical PNGs plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_metadata(metadata_csv, in_dir)
    studies = preprocess_records(records, crop_threshold, prune_sigma)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in studies:
            png = out_dir / f"{s.image_id}.png"
            write_png16(png, s.image.pixels)
            writer.writerow(
                [s.image_id, s.study_id, s.view, s.right_source, s.left_source,
                 s.category, ";".join(s.image.provenance), file_sha256(png)]
            )
    return manifest
