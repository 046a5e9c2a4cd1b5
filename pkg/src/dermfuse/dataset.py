"""ISIC-style dataset ingest: ground-truth manifest, image directory, splits.

The manifest is a UTF-8 CSV with header exactly
``image_id,melanoma,seborrheic_keratosis``; a row with both indicators 0 is a
benign nevus. Unlabeled test manifests carry only the ``image_id`` column.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ValidationError
from .preprocess import ALL_TAGS
from .rng import SplitMix64

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["image_id", "melanoma", "seborrheic_keratosis"]
UNLABELED_HEADER = ["image_id"]
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")

SPLIT_UNIT_IMAGE = "original-image"
SPLIT_UNIT_INSTANCE = "augmented-instance"


class ManifestError(ValidationError):
    pass


class MissingImageError(ManifestError):
    def __init__(self, image_id):
        super().__init__(f"no image file found for id {image_id!r}")
        self.image_id = image_id


class DuplicateIdError(ManifestError):
    def __init__(self, image_id):
        super().__init__(f"duplicate image id {image_id!r} in manifest")
        self.image_id = image_id


class ImageDecodeError(ManifestError):
    def __init__(self, path, cause):
        super().__init__(f"could not decode image {path}: {cause}")
        self.path = path


class LesionClass(Enum):
    """The three lesion classes, in their fixed serialization order."""

    MELANOMA = 0
    SEBORRHEIC_KERATOSIS = 1
    NEVUS = 2

    @property
    def key(self) -> str:
        return self.name.lower()

    def __lt__(self, other):
        return self.value < other.value


CLASS_ORDER = (LesionClass.MELANOMA, LesionClass.SEBORRHEIC_KERATOSIS, LesionClass.NEVUS)


@dataclass
class LabeledImage:
    id: str
    pixels: np.ndarray  # HxWx3 uint8
    label: LesionClass | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("image id must be nonempty")
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValidationError(f"image {self.id!r}: expected HxWx3 pixels, got shape {p.shape}")


@dataclass
class Dataset:
    images: list[LabeledImage] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def ids(self) -> list[str]:
        return [img.id for img in self.images]

    def by_id(self, image_id: str) -> LabeledImage:
        for img in self.images:
            if img.id == image_id:
                return img
        raise KeyError(image_id)

    def class_counts(self) -> dict[LesionClass, int]:
        counts = {c: 0 for c in CLASS_ORDER}
        for img in self.images:
            if img.label is not None:
                counts[img.label] += 1
        return counts


def _parse_indicator(cell: str, row_id: str, column: str) -> int:
    if cell.strip() in ("0", "0.0"):
        return 0
    if cell.strip() in ("1", "1.0"):
        return 1
    raise ManifestError(f"row {row_id!r}: column {column!r} must be 0/0.0/1/1.0, got {cell!r}")


def _find_image_file(image_dir: Path, image_id: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        for candidate in (image_dir / f"{image_id}{ext}", image_dir / f"{image_id}{ext.upper()}"):
            if candidate.is_file():
                return candidate
    raise MissingImageError(image_id)


def _decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(path, exc) from exc


def load_manifest(manifest_path, image_dir) -> Dataset:
    """Load a manifest CSV plus its image directory into an immutable Dataset.

    Rows keep manifest order. Labeled manifests carry the full 3-column
    header; a header of just ``image_id`` loads an unlabeled dataset.
    """
    manifest_path = Path(manifest_path)
    image_dir = Path(image_dir)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    if not image_dir.is_dir():
        raise ManifestError(f"image directory not found: {image_dir}")

    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {manifest_path} is empty") from None
        header = [h.strip() for h in header]
        if header == MANIFEST_HEADER:
            labeled = True
        elif header == UNLABELED_HEADER:
            labeled = False
        else:
            raise ManifestError(
                f"manifest header must be {','.join(MANIFEST_HEADER)!r} "
                f"or {','.join(UNLABELED_HEADER)!r}, got {','.join(header)!r}"
            )
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]

    images: list[LabeledImage] = []
    seen: set[str] = set()
    for row in rows:
        if len(row) != len(header):
            raise ManifestError(f"row {row!r} has {len(row)} cells, expected {len(header)}")
        image_id = row[0].strip()
        if not image_id:
            raise ManifestError("manifest contains a row with an empty image_id")
        if image_id in seen:
            raise DuplicateIdError(image_id)
        seen.add(image_id)

        label = None
        if labeled:
            mel = _parse_indicator(row[1], image_id, "melanoma")
            sk = _parse_indicator(row[2], image_id, "seborrheic_keratosis")
            if mel and sk:
                raise ManifestError(f"row {image_id!r}: melanoma and seborrheic_keratosis both set")
            label = (
                LesionClass.MELANOMA if mel
                else LesionClass.SEBORRHEIC_KERATOSIS if sk
                else LesionClass.NEVUS
            )

        pixels = _decode_image(_find_image_file(image_dir, image_id))
        images.append(LabeledImage(id=image_id, pixels=pixels, label=label))

    dataset = Dataset(images)
    if labeled:
        counts = dataset.class_counts()
        log.info(
            "loaded %d images (melanoma=%d, seborrheic_keratosis=%d, nevus=%d)",
            len(dataset),
            counts[LesionClass.MELANOMA],
            counts[LesionClass.SEBORRHEIC_KERATOSIS],
            counts[LesionClass.NEVUS],
        )
    else:
        log.info("loaded %d unlabeled images", len(dataset))
    return dataset


def load_labels(manifest_path) -> dict[str, LesionClass | None]:
    """Read just the id -> label mapping from a manifest (no image decoding)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = [h.strip() for h in next(reader, [])]
        if header == MANIFEST_HEADER:
            labeled = True
        elif header == UNLABELED_HEADER:
            labeled = False
        else:
            raise ManifestError(f"unrecognized manifest header {','.join(header)!r}")
        labels: dict[str, LesionClass | None] = {}
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            image_id = row[0].strip()
            if image_id in labels:
                raise DuplicateIdError(image_id)
            if labeled:
                mel = _parse_indicator(row[1], image_id, "melanoma")
                sk = _parse_indicator(row[2], image_id, "seborrheic_keratosis")
                if mel and sk:
                    raise ManifestError(f"row {image_id!r}: melanoma and seborrheic_keratosis both set")
                labels[image_id] = (
                    LesionClass.MELANOMA if mel
                    else LesionClass.SEBORRHEIC_KERATOSIS if sk
                    else LesionClass.NEVUS
                )
            else:
                labels[image_id] = None
    return labels


def save_manifest(dataset: Dataset, path) -> None:
    """Write the ground-truth CSV back out (round-trips with load_manifest)."""
    labeled = any(img.label is not None for img in dataset)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if labeled:
            writer.writerow(MANIFEST_HEADER)
            for img in dataset:
                writer.writerow([
                    img.id,
                    "1.0" if img.label is LesionClass.MELANOMA else "0.0",
                    "1.0" if img.label is LesionClass.SEBORRHEIC_KERATOSIS else "0.0",
                ])
        else:
            writer.writerow(UNLABELED_HEADER)
            for img in dataset:
                writer.writerow([img.id])


@dataclass
class DatasetSplit:
    train_ids: list[str]
    holdout_ids: list[str]
    seed: int
    fraction: float
    unit: str = SPLIT_UNIT_IMAGE


def variant_ids(image_id: str) -> list[str]:
    """The 8 augmented-instance ids derived from one source image id."""
    return [f"{image_id}::{tag.variant_id}" for tag in ALL_TAGS]


def source_of_variant(instance_id: str) -> str:
    return instance_id.split("::", 1)[0]


def _round_half_up(x: float) -> int:
    import math

    return int(math.floor(x + 0.5))


def _allocate_stratified(groups: list[list[str]], fraction: float, total_train: int) -> list[int]:
    # largest-remainder allocation so per-class counts sum to the global count
    quotas = [fraction * len(g) for g in groups]
    base = [int(np.floor(q)) for q in quotas]
    short = total_train - sum(base)
    order = sorted(range(len(groups)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split_ids(
    ids: list[str],
    fraction: float,
    seed: int,
    unit: str = SPLIT_UNIT_IMAGE,
    stratified: bool = False,
    labels: dict[str, LesionClass | None] | None = None,
) -> DatasetSplit:
    """Split a list of source ids without needing the decoded images."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must be in (0,1), got {fraction}")
    if not ids:
        raise ValidationError("cannot split an empty dataset")
    if unit not in (SPLIT_UNIT_IMAGE, SPLIT_UNIT_INSTANCE):
        raise ValidationError(f"unknown split unit {unit!r}")

    labels = labels or {}
    if unit == SPLIT_UNIT_IMAGE:
        units = list(ids)
        unit_labels = {i: labels.get(i) for i in ids}
    else:
        units = [vid for i in ids for vid in variant_ids(i)]
        unit_labels = {vid: labels.get(i) for i in ids for vid in variant_ids(i)}

    n = len(units)
    if fraction * n < 1.0:
        raise ValidationError(f"fraction {fraction} of {n} units leaves no training data")
    n_train = _round_half_up(fraction * n)

    rng = SplitMix64(seed)
    if stratified:
        if any(unit_labels[u] is None for u in units):
            raise ValidationError("stratified split requires a labeled dataset")
        groups: dict[LesionClass, list[str]] = {c: [] for c in CLASS_ORDER}
        for u in units:
            groups[unit_labels[u]].append(u)
        group_lists = [groups[c] for c in CLASS_ORDER if groups[c]]
        takes = _allocate_stratified(group_lists, fraction, n_train)
        train, holdout = [], []
        for g, take in zip(group_lists, takes):
            rng.shuffle(g)
            train.extend(g[:take])
            holdout.extend(g[take:])
    else:
        rng.shuffle(units)
        train, holdout = units[:n_train], units[n_train:]

    return DatasetSplit(train_ids=train, holdout_ids=holdout, seed=seed, fraction=fraction, unit=unit)


def split(
    dataset: Dataset,
    fraction: float,
    seed: int,
    unit: str = SPLIT_UNIT_IMAGE,
    stratified: bool = False,
) -> DatasetSplit:
    """Deterministic train/holdout partition of the dataset's ids.

    With unit="original-image" the split is over source image ids, so all 8
    augmented variants of one image land on the same side. With
    unit="augmented-instance" the split is over variant ids, replicating a
    split taken after augmentation.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot split an empty dataset")
    return split_ids(
        dataset.ids,
        fraction,
        seed,
        unit=unit,
        stratified=stratified,
        labels={img.id: img.label for img in dataset},
    )


def save_split(sp: DatasetSplit, path) -> None:
    """Persist a split as a small text record: parameters, then both id lists."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# dermfuse split v1\n")
        fh.write(f"seed={sp.seed}\n")
        fh.write(f"fraction={sp.fraction!r}\n")
        fh.write(f"unit={sp.unit}\n")
        fh.write("[train]\n")
        for i in sp.train_ids:
            fh.write(i + "\n")
        fh.write("[holdout]\n")
        for i in sp.holdout_ids:
            fh.write(i + "\n")


def load_split(path) -> DatasetSplit:
    seed = fraction = unit = None
    train: list[str] = []
    holdout: list[str] = []
    section = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if line == "[train]":
                section = train
            elif line == "[holdout]":
                section = holdout
            elif section is not None:
                section.append(line)
            elif "=" in line:
                key, val = line.split("=", 1)
                if key == "seed":
                    seed = int(val)
                elif key == "fraction":
                    fraction = float(val)
                elif key == "unit":
                    unit = val
            else:
                raise ValidationError(f"unrecognized split record line: {line!r}")
    if seed is None or fraction is None or unit is None:
        raise ValidationError(f"split record {path} is missing seed/fraction/unit")
    return DatasetSplit(train_ids=train, holdout_ids=holdout, seed=seed, fraction=fraction, unit=unit)
