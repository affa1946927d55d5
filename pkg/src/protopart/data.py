"""Datasets: manifests, image/mask loading, the synthetic generator, valid sets.

Classes are NV=0 and MEL=1. Lesion masks are binary with lesion/relevant = 0
and non-relevant = 1 after loading, regardless of the file's own polarity
(see `--mask-polarity`).
"""

from __future__ import annotations

import csv
import fcntl
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ValidationError

CLASS_NAMES = {0: "NV", 1: "MEL"}
NAME_TO_CLASS = {"NV": 0, "MEL": 1}

MASK_POLARITIES = ("lesion-white", "lesion-black")


@dataclass
class ImageRecord:
    image_id: str
    path: Path
    label: int
    mask_path: Path | None = None


@dataclass
class Manifest:
    records: list
    split: str = ""
    source: Path | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    def class_counts(self, num_classes: int = 2) -> np.ndarray:
        return np.bincount(self.labels(), minlength=num_classes)

    def by_id(self) -> dict:
        return {r.image_id: r for r in self.records}


def load_manifest(path, num_classes: int = 2, require_masks: bool = False) -> Manifest:
    """Read an image,label,mask CSV; every problem is reported, not just the first."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    problems = []
    records = []
    seen = set()
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file (expected an image,label,mask header)")
        if [h.strip().lower() for h in header[:3]] != ["image", "label", "mask"]:
            raise ValidationError(f"{path}: expected header image,label,mask, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            row = row + [""] * (3 - len(row))
            image_id, label_raw, mask_raw = (c.strip() for c in row[:3])
            label_raw_up = label_raw.upper()
            if label_raw_up in NAME_TO_CLASS:
                label = NAME_TO_CLASS[label_raw_up]
            else:
                try:
                    label = int(label_raw)
                except ValueError:
                    problems.append(f"row {lineno}: unparseable label {label_raw!r}")
                    continue
            if not 0 <= label < num_classes:
                problems.append(f"row {lineno}: label {label} outside [0, {num_classes})")
                continue
            if image_id in seen:
                problems.append(f"row {lineno}: duplicate image id {image_id!r}")
                continue
            seen.add(image_id)
            img_path = (root / image_id).resolve() if not os.path.isabs(image_id) else Path(image_id)
            if not img_path.exists():
                problems.append(f"row {lineno}: image file missing: {img_path}")
                continue
            mask_path = None
            if mask_raw:
                mask_path = (root / mask_raw).resolve() if not os.path.isabs(mask_raw) else Path(mask_raw)
                if not mask_path.exists():
                    problems.append(f"row {lineno}: mask file missing: {mask_path}")
                    continue
            elif require_masks:
                problems.append(f"row {lineno}: image {image_id!r} has no mask")
                continue
            records.append(ImageRecord(image_id, img_path, label, mask_path))
    if problems:
        listing = "\n  - ".join(problems)
        raise ValidationError(f"{path}: {len(problems)} invalid manifest row(s):\n  - {listing}")
    if not records:
        warnings.warn(f"{path}: manifest is empty")
    split = path.stem.replace("manifest_", "") if path.stem.startswith("manifest_") else path.stem
    return Manifest(records, split=split, source=path)


def save_manifest(path, rows) -> None:
    """rows: iterable of (image, label, mask) path/label triples."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "label", "mask"])
        for image, label, mask in rows:
            writer.writerow([image, label, mask or ""])


# ---------------------------------------------------------------------------
# images and masks
# ---------------------------------------------------------------------------


def load_image(path, size: int) -> np.ndarray:
    """8-bit image file -> (size, size, 3) float array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=float) / 255.0


def load_images(records, size: int) -> np.ndarray:
    return np.stack([load_image(r.path, size) for r in records])


def load_mask(path, height: int, width: int, polarity: str = "lesion-white") -> np.ndarray:
    """Binary lesion mask resized nearest-neighbor; lesion = 0 after loading."""
    if polarity not in MASK_POLARITIES:
        raise ValidationError(f"mask polarity must be one of {MASK_POLARITIES}, got {polarity!r}")
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (width, height):
            im = im.resize((width, height), Image.NEAREST)
        arr = np.asarray(im, dtype=float) / 255.0
    bright = (arr >= 0.5).astype(np.uint8)
    mask = (1 - bright) if polarity == "lesion-white" else bright
    if mask.min() == 1:
        warnings.warn(f"{path}: mask marks no lesion pixels (all non-relevant)")
    return mask


def compute_channel_stats(images: np.ndarray):
    mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    std = np.where(std < 1e-6, 1.0, std)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


# ---------------------------------------------------------------------------
# synthetic confound dataset
# ---------------------------------------------------------------------------

SPLIT_FRACTIONS = {"train": 0.7, "val": 0.15, "test": 0.15}


def _ellipse_mask(size, cx, cy, ax, ay, angle):
    yy, xx = np.mgrid[0:size, 0:size]
    ca, sa = np.cos(angle), np.sin(angle)
    xr = (xx - cx) * ca + (yy - cy) * sa
    yr = -(xx - cx) * sa + (yy - cy) * ca
    return (xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0


def _smooth_noise(rng, size, cells, amp):
    """Low-frequency noise: a coarse grid blown up to full resolution."""
    coarse = rng.normal(0.0, amp, (cells, cells))
    reps = -(-size // cells)
    return np.kron(coarse, np.ones((reps, reps)))[:size, :size]


def generate_synthetic(out_dir, n_per_class: int, seed: int, image_size: int = 224,
                       confound_fraction: float = 0.5) -> dict:
    """Write a two-class toy dermoscopy set with exact masks.

    Class is carried by the lesion-interior brightness (MEL dark and speckled,
    NV light and smooth). A near-black corner wedge is stamped onto a
    `confound_fraction` share of MEL images only, mimicking the dark-corner
    artifacts that plague real dermoscopy archives. Returns manifest paths.
    """
    if n_per_class < 2:
        raise ConfigurationError("need at least 2 images per class")
    if not 0.0 <= confound_fraction <= 1.0:
        raise ConfigurationError("confound_fraction must lie in [0, 1]")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    size = image_size
    rows = []  # (image_rel, label, mask_rel, has_confound)

    yy_full, xx_full = np.mgrid[0:size, 0:size]
    for label in (0, 1):
        name = CLASS_NAMES[label].lower()
        n_confound = int(round(confound_fraction * n_per_class)) if label == 1 else 0
        confounded = set(rng.permutation(n_per_class)[:n_confound].tolist())
        for i in range(n_per_class):
            # background skin varies a lot between images (tone, gradient,
            # texture) so it cannot form a tight latent cluster; the lesion
            # interior and the corner artifact are the consistent structures
            base_r = rng.uniform(0.55, 0.90)
            skin = np.array([base_r, base_r * rng.uniform(0.72, 0.85),
                             base_r * rng.uniform(0.58, 0.78)])
            img = np.ones((size, size, 3)) * skin
            gdir = rng.uniform(-1, 1, 2)
            gradient = (gdir[0] * (yy_full / size - 0.5) + gdir[1] * (xx_full / size - 0.5))
            img += rng.uniform(0.04, 0.10) * gradient[:, :, None]
            img += _smooth_noise(rng, size, 5, rng.uniform(0.03, 0.07))[:, :, None]
            img += rng.normal(0, 0.02, img.shape)

            cx, cy = (rng.uniform(0.44, 0.56, 2) * size)
            ax, ay = rng.uniform(0.30, 0.44, 2) * size
            angle = rng.uniform(0, np.pi)
            lesion = _ellipse_mask(size, cx, cy, ax, ay, angle)

            if label == 1:  # melanoma: darker red-brown, coarsely mottled interior
                base = rng.uniform(0.40, 0.46)
                tint = np.array([base + 0.10, base * 0.62, base * 0.55])
                texture = _smooth_noise(rng, size, max(size // 16, 4), 0.05)
            else:  # nevus: lighter tan, smooth interior
                base = rng.uniform(0.54, 0.60)
                tint = np.array([base + 0.04, base * 0.92, base * 0.78])
                texture = _smooth_noise(rng, size, 6, 0.03)
            interior = tint[None, None, :] + texture[:, :, None]
            img = np.where(lesion[:, :, None], interior, img)

            if i in confounded:
                corner = rng.integers(0, 4)
                radius = rng.uniform(0.28, 0.38) * size
                cyx = {0: (0, 0), 1: (0, size - 1), 2: (size - 1, 0), 3: (size - 1, size - 1)}[corner]
                wedge = (yy_full - cyx[0]) ** 2 + (xx_full - cyx[1]) ** 2 <= radius ** 2
                wedge &= ~lesion  # never overwrite the lesion itself
                dark = 0.06 + rng.normal(0, 0.01, img.shape).clip(-0.02, 0.02)
                img = np.where(wedge[:, :, None], dark, img)

            img = np.clip(img, 0.0, 1.0)
            stem = f"{name}_{i:03d}.png"
            Image.fromarray((img * 255).round().astype(np.uint8)).save(out_dir / "images" / stem)
            # lesion-white mask file, exact same boolean as the rendered ellipse
            Image.fromarray((lesion * 255).astype(np.uint8)).save(out_dir / "masks" / stem)
            rows.append((f"images/{stem}", label, f"masks/{stem}", i in confounded))

    manifests = {"all": out_dir / "manifest.csv"}
    save_manifest(manifests["all"], [(r[0], r[1], r[2]) for r in rows])

    # stratified deterministic splits
    split_rows = {name: [] for name in SPLIT_FRACTIONS}
    for label in (0, 1):
        class_rows = [r for r in rows if r[1] == label]
        order = rng.permutation(len(class_rows))
        n_train = int(round(SPLIT_FRACTIONS["train"] * len(class_rows)))
        n_val = int(round(SPLIT_FRACTIONS["val"] * len(class_rows)))
        for pos, idx in enumerate(order):
            split = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
            split_rows[split].append(class_rows[idx])
    for split, srows in split_rows.items():
        manifests[split] = out_dir / f"manifest_{split}.csv"
        save_manifest(manifests[split], [(r[0], r[1], r[2]) for r in srows])
    return manifests


# ---------------------------------------------------------------------------
# valid prototype sets
# ---------------------------------------------------------------------------

VALID_SET_VERSION = 1


@dataclass
class ValidEntry:
    class_id: int
    image: str
    bbox: tuple  # (x, y, w, h) in input pixels
    note: str = ""
    thumbnail: str | None = None


@dataclass
class ValidPrototypeSet:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def per_class_counts(self, num_classes: int = 2) -> np.ndarray:
        counts = np.zeros(num_classes, dtype=int)
        for e in self.entries:
            counts[e.class_id] += 1
        return counts


def _check_bbox(bbox, image_size, where: str):
    if len(bbox) != 4:
        raise ValidationError(f"{where}: bbox must be [x, y, w, h]")
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise ValidationError(f"{where}: bbox has non-positive size {bbox}")
    if image_size is not None and (x < 0 or y < 0 or x + w > image_size or y + h > image_size):
        raise ValidationError(f"{where}: bbox {bbox} exceeds image bounds {image_size}px")


def save_valid_set(path, vset: ValidPrototypeSet) -> None:
    """Schema v1 JSON; atomic replace under an advisory lock (single writer)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in vset.entries:
        item = {"class": int(e.class_id), "image": e.image,
                "bbox": [int(v) for v in e.bbox], "note": e.note}
        if e.thumbnail:
            item["thumbnail"] = e.thumbnail
        entries.append(item)
    payload = json.dumps({"version": VALID_SET_VERSION, "entries": entries}, indent=1)
    lock_path = path.with_suffix(path.suffix + ".lock")
    with open(lock_path, "w") as lock_fh:
        fcntl.flock(lock_fh, fcntl.LOCK_EX)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(payload)
        os.replace(tmp, path)
        fcntl.flock(lock_fh, fcntl.LOCK_UN)


def load_valid_set(path, image_size: int | None = None, num_classes: int = 2) -> ValidPrototypeSet:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"valid set not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != VALID_SET_VERSION:
        raise ValidationError(f"{path}: expected valid_set schema version {VALID_SET_VERSION}")
    entries = []
    for i, item in enumerate(doc.get("entries", [])):
        where = f"{path} entry {i}"
        try:
            cls = int(item["class"])
            image = str(item["image"])
            bbox = tuple(int(v) for v in item["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{where}: missing or malformed field ({exc})") from exc
        if not 0 <= cls < num_classes:
            raise ValidationError(f"{where}: class {cls} outside [0, {num_classes})")
        _check_bbox(bbox, image_size, where)
        entries.append(ValidEntry(cls, image, bbox, item.get("note", ""),
                                  item.get("thumbnail")))
    return ValidPrototypeSet(entries)
