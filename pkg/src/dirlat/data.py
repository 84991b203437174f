"""Manifest ingestion, class-balanced sampling, splits and a synthetic image generator.

Manifests are CSV files with a path column followed by one column per class.
Cells hold 1, 0, -1 (uncertain) or blank (not mentioned); CheXpert's float
spellings (``1.0``, ``-1.0``) are accepted too.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CHEXPERT_CLASSES = ("No Finding", "Lung Opacity", "Pleural Effusion", "Support Devices")
SYNTHETIC_CLASSES = ("no_finding", "blob", "texture", "line")
UNCERTAIN_POLICIES = ("to_negative", "drop_row")

_CELL_VALUES = {"1": 1, "1.0": 1, "0": 0, "0.0": 0, "-1": -1, "-1.0": -1, "": None}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    path: str
    labels: tuple[int, ...]
    raw: tuple[int | None, ...] = ()


@dataclass
class ManifestLoad:
    rows: list[ManifestRow]
    counts: Counter = field(default_factory=Counter)


def _parse_cell(cell: str, where: str) -> int | None:
    key = cell.strip()
    if key not in _CELL_VALUES:
        raise ManifestError(f"{where}: invalid label cell {cell!r}")
    return _CELL_VALUES[key]


def load_manifest_with_counts(csv_path, class_names: Sequence[str], uncertain_policy: str = "to_negative") -> ManifestLoad:
    if uncertain_policy not in UNCERTAIN_POLICIES:
        raise ManifestError(f"unknown uncertain_policy {uncertain_policy!r}")
    csv_path = Path(csv_path)
    try:
        fh = open(csv_path, newline="")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {csv_path}: {exc}") from exc
    counts: Counter = Counter()
    rows: list[ManifestRow] = []
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        path_col = next((h for h in header if h.lower() == "path"), None)
        missing = [c for c in class_names if c not in header]
        if path_col is None or missing:
            raise ManifestError(f"{csv_path}: missing columns {(['path'] if path_col is None else []) + missing}")
        for lineno, rec in enumerate(reader, start=2):
            path = (rec[path_col] or "").strip()
            if not path:
                raise ManifestError(f"{csv_path}:{lineno}: empty path")
            raw = tuple(_parse_cell(rec[c] or "", f"{csv_path}:{lineno}:{c}") for c in class_names)
            unresolved = [v for v in raw if v is None or v == -1]
            counts["uncertain"] += sum(v == -1 for v in raw)
            counts["missing"] += sum(v is None for v in raw)
            if unresolved and uncertain_policy == "drop_row":
                counts["dropped_rows"] += 1
                continue
            if unresolved:
                counts["mapped_to_negative"] += len(unresolved)
            labels = tuple(1 if v == 1 else 0 for v in raw)
            rows.append(ManifestRow(path, labels, raw))
    counts["rows"] = len(rows)
    logger.info("manifest %s: %s", csv_path, dict(counts))
    return ManifestLoad(rows, counts)


def load_manifest(csv_path, class_names: Sequence[str], uncertain_policy: str = "to_negative") -> list[ManifestRow]:
    """Parse a manifest; -1 and blank cells are resolved by ``uncertain_policy``."""
    return load_manifest_with_counts(csv_path, class_names, uncertain_policy).rows


def write_manifest(rows: Iterable[ManifestRow], class_names: Sequence[str], csv_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", *class_names])
        for r in rows:
            w.writerow([r.path, *r.labels])


def balanced_sample(rows: Sequence[ManifestRow], per_class_quota: int, seed: int, class_names: Sequence[str] | None = None):
    """Up to ``per_class_quota`` positives per class, sampled without replacement.

    Classes are drawn independently and the union is deduplicated by path,
    so a row picked for two classes appears once. Returns ``(rows, report)``
    where report maps class name to ``{"selected", "available", "shortfall"}``.
    """
    if per_class_quota <= 0:
        raise ValueError("per_class_quota must be > 0")
    n_classes = len(rows[0].labels) if rows else len(class_names or ())
    names = list(class_names) if class_names is not None else [f"class_{c}" for c in range(n_classes)]
    rng = np.random.default_rng(seed)
    chosen: dict[str, ManifestRow] = {}
    report = {}
    for c, name in enumerate(names):
        positives = [r for r in rows if r.labels[c] == 1]
        take = min(per_class_quota, len(positives))
        picks = rng.permutation(len(positives))[:take]
        for i in picks:
            chosen.setdefault(positives[i].path, positives[i])
        shortfall = per_class_quota - take
        report[name] = {"selected": take, "available": len(positives), "shortfall": shortfall}
        if shortfall:
            logger.warning("class %s: only %d positives for quota %d", name, take, per_class_quota)
    logger.info("balanced sample: %d unique rows", len(chosen))
    return list(chosen.values()), report


def cooccurrence_matrix(rows) -> np.ndarray:
    """Class-by-class counts of rows positive for both classes (diagonal: class frequency)."""
    y = np.asarray([r.labels for r in rows] if rows and isinstance(rows[0], ManifestRow) else rows, dtype=np.int64)
    if y.size == 0:
        raise ValueError("cooccurrence_matrix needs at least one row")
    y = (y == 1).astype(np.int64)
    return y.T @ y


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [f * n for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(rows: Sequence, fractions: Sequence[float] = (0.75, 0.125, 0.125), seed: int = 0,
                  key: Callable = lambda r: r.path) -> DatasetSplit:
    """Shuffled train/val/test partition, disjoint by ``key`` (image path)."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"invalid split fractions {fractions}")
    unique: dict = {}
    for r in rows:
        unique.setdefault(key(r), r)
    if len(unique) != len(rows):
        logger.warning("split_dataset: dropped %d duplicate paths", len(rows) - len(unique))
    items = list(unique.values())
    perm = np.random.default_rng(seed).permutation(len(items))
    a, b, _ = largest_remainder(len(items), fr)
    shuffled = [items[i] for i in perm]
    split = DatasetSplit(shuffled[:a], shuffled[a:a + b], shuffled[a + b:], seed)
    logger.info("split sizes train/val/test = %s", split.sizes())
    return split


# --------------------------------------------------------------------------
# Images
# --------------------------------------------------------------------------


@dataclass
class LabeledImages:
    """Images ``[count, 1, size, size]`` in [0, 1] with binary labels ``[count, classes]``."""

    images: np.ndarray
    labels: np.ndarray
    ids: list[str]
    class_names: list[str]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1 or self.images.shape[2] != self.images.shape[3]:
            raise ValueError(f"images must be [N, 1, S, S], got {self.images.shape}")
        if len(self.ids) != len(self.images) or len(self.labels) != len(self.images):
            raise ValueError("images, labels and ids differ in length")
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def take(self, ids: Iterable[str]) -> "LabeledImages":
        idx = np.array([self._index[k] for k in ids], dtype=np.int64)
        return LabeledImages(self.images[idx], self.labels[idx], [self.ids[i] for i in idx], self.class_names)

    def subset(self, indices) -> "LabeledImages":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledImages(self.images[idx], self.labels[idx], [self.ids[i] for i in idx], self.class_names)


def load_image(path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_images(rows: Sequence[ManifestRow], root, image_size: int, class_names: Sequence[str]) -> LabeledImages:
    root = Path(root)
    imgs = np.empty((len(rows), 1, image_size, image_size), dtype=np.float32)
    for i, r in enumerate(rows):
        p = Path(r.path)
        imgs[i, 0] = load_image(p if p.is_absolute() else root / p, image_size)
    labels = np.asarray([r.labels for r in rows], dtype=np.int64).reshape(len(rows), len(class_names))
    return LabeledImages(imgs, labels, [r.path for r in rows], list(class_names))


# --------------------------------------------------------------------------
# Synthetic multi-label images
# --------------------------------------------------------------------------

FEATURE_KINDS = ("blob", "texture", "line")
COOCCURRENCE_POLICIES = ("independent", "exclusive")


@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for chest X-rays.

    ``class_names[0]`` is the "no finding" class (positive iff no feature is
    present); the remaining classes map one-to-one onto ``features``.
    """

    image_size: int = 64
    features: tuple[str, ...] = FEATURE_KINDS
    prevalence: tuple[float, ...] = (0.3, 0.3, 0.3)
    cooccurrence: str = "independent"
    noise: float = 0.03
    class_names: tuple[str, ...] = SYNTHETIC_CLASSES

    def validate(self) -> None:
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if any(f not in FEATURE_KINDS for f in self.features):
            raise ValueError(f"features must be drawn from {FEATURE_KINDS}")
        if len(self.prevalence) != len(self.features) or len(self.class_names) != len(self.features) + 1:
            raise ValueError("need one prevalence per feature and one class name per feature plus no-finding")
        if any(not 0 <= p < 1 for p in self.prevalence):
            raise ValueError("prevalences must lie in [0, 1)")
        if self.cooccurrence not in COOCCURRENCE_POLICIES:
            raise ValueError(f"cooccurrence must be one of {COOCCURRENCE_POLICIES}")
        if self.cooccurrence == "exclusive" and sum(self.prevalence) > 1:
            raise ValueError("exclusive policy needs prevalences summing to <= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def draw_sample_params(rng: np.random.Generator) -> dict:
    """Anatomy and feature geometry in unit coordinates. All fields are always drawn."""
    return {
        "brightness": rng.uniform(0.30, 0.42),
        "lung_w": rng.uniform(0.15, 0.21),
        "lung_h": rng.uniform(0.28, 0.36),
        "lung_cy": rng.uniform(0.42, 0.50),
        "lung_dx": rng.uniform(0.19, 0.24),
        "blob": {"cx": rng.uniform(0.25, 0.75), "cy": rng.uniform(0.64, 0.84),
                 "r": rng.uniform(0.07, 0.10), "amp": rng.uniform(0.40, 0.50)},
        "texture": {"x0": rng.uniform(0.12, 0.55), "y0": rng.uniform(0.10, 0.40), "size": rng.uniform(0.28, 0.34),
                    "fx": rng.uniform(0.9, 1.4), "fy": rng.uniform(0.9, 1.4), "phase": rng.uniform(0, 2 * np.pi, 2),
                    "amp": rng.uniform(0.26, 0.34)},
        "line": {"y_left": rng.uniform(0.1, 0.9), "y_right": rng.uniform(0.1, 0.9),
                 "mid": (rng.uniform(0.35, 0.65), rng.uniform(0.15, 0.85)), "width": 0.025,
                 "amp": rng.uniform(0.45, 0.55)},
    }


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")


def _background(p: dict, size: int) -> np.ndarray:
    x, y = _grid(size)
    body = np.exp(-(((x - 0.5) / 0.42) ** 2 + ((y - 0.55) / 0.55) ** 2) ** 2)
    img = p["brightness"] * (0.6 + 0.4 * body)
    for side in (-1, 1):
        cx = 0.5 + side * p["lung_dx"]
        d = ((x - cx) / p["lung_w"]) ** 2 + ((y - p["lung_cy"]) / p["lung_h"]) ** 2
        img = img - 0.14 * np.exp(-d ** 2)
    return img


def _segment_distance(x, y, a, b):
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    t = np.clip(((x - ax) * vx + (y - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.hypot(x - (ax + t * vx), y - (ay + t * vy))


def feature_layer(p: dict, kind: str, size: int) -> np.ndarray:
    """Additive intensity of one feature; strictly positive exactly on its support."""
    x, y = _grid(size)
    if kind == "blob":
        q = p["blob"]
        r2 = ((x - q["cx"]) ** 2 + (y - q["cy"]) ** 2) / q["r"] ** 2
        return q["amp"] * np.where(r2 < 1, (1 - r2) ** 2, 0.0)
    if kind == "texture":
        q = p["texture"]
        u = (x - q["x0"]) / q["size"]
        v = (y - q["y0"]) / q["size"]
        inside = (u > 0) & (u < 1) & (v > 0) & (v < 1)
        window = np.sin(np.pi * np.clip(u, 0, 1)) * np.sin(np.pi * np.clip(v, 0, 1))
        waves = 0.55 + 0.45 * np.sin(2 * np.pi * 4 * q["fx"] * u + q["phase"][0]) * np.sin(2 * np.pi * 4 * q["fy"] * v + q["phase"][1])
        return q["amp"] * np.where(inside, window * waves, 0.0)
    if kind == "line":
        q = p["line"]
        pts = [(0.0, q["y_left"]), tuple(q["mid"]), (1.0, q["y_right"])]
        d = np.minimum(_segment_distance(x, y, pts[0], pts[1]), _segment_distance(x, y, pts[1], pts[2]))
        return q["amp"] * np.clip(1 - d / q["width"], 0.0, None)
    raise ValueError(f"unknown feature kind {kind!r}")


def render_sample(p: dict, feature_labels: Sequence[int], spec: SyntheticSpec, noise: np.ndarray | None = None) -> np.ndarray:
    img = _background(p, spec.image_size)
    for kind, on in zip(spec.features, feature_labels):
        if on:
            img = img + feature_layer(p, kind, spec.image_size)
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def _draw_labels(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    prev = np.asarray(spec.prevalence, dtype=np.float64)
    if spec.cooccurrence == "independent":
        return (rng.uniform(size=prev.size) < prev).astype(np.int64)
    u = rng.uniform()
    out = np.zeros(prev.size, dtype=np.int64)
    hit = np.flatnonzero(u < np.cumsum(prev))
    if hit.size:
        out[hit[0]] = 1
    return out


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    data: LabeledImages
    params: list[dict]

    @property
    def rows(self) -> list[ManifestRow]:
        return [ManifestRow(i, tuple(int(v) for v in lab), tuple(int(v) for v in lab))
                for i, lab in zip(self.data.ids, self.data.labels)]

    def write(self, out_dir) -> Path:
        """Write 8-bit PNGs under ``images/`` and ``manifest.csv``; returns the manifest path."""
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for img, rel in zip(self.data.images, self.data.ids):
            px = np.round(img[0] * 255.0).astype(np.uint8)
            Image.fromarray(px, mode="L").save(out_dir / rel, format="PNG")
        manifest = out_dir / "manifest.csv"
        write_manifest(self.rows, self.spec.class_names, manifest)
        return manifest


def generate_synthetic(spec: SyntheticSpec, n: int, seed: int) -> SyntheticDataset:
    """Deterministic synthetic multi-label images with per-class visual features."""
    spec.validate()
    if n <= 0:
        raise ValueError("n must be > 0")
    rng = np.random.default_rng(seed)
    s = spec.image_size
    images = np.empty((n, 1, s, s), dtype=np.float32)
    labels = np.empty((n, len(spec.class_names)), dtype=np.int64)
    params = []
    for i in range(n):
        feat = _draw_labels(rng, spec)
        p = draw_sample_params(rng)
        noise = rng.normal(0.0, spec.noise, size=(s, s)) if spec.noise > 0 else None
        images[i, 0] = render_sample(p, feat, spec, noise)
        labels[i, 0] = int(not feat.any())
        labels[i, 1:] = feat
        params.append(p)
    width = max(6, len(str(n - 1)))
    ids = [f"images/synth_{i:0{width}d}.png" for i in range(n)]
    return SyntheticDataset(spec, LabeledImages(images, labels, ids, list(spec.class_names)), params)
