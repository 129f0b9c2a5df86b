"""Synthetic shapes dataset, COCO-style annotation I/O and degraded-set construction.

On-disk dataset layout::

    <root>/images/<file_name>   8-bit RGB PNG
    <root>/annotations.json     COCO-style subset (see README)
    <root>/manifest.json        generation / degradation manifest
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .degradation import (
    DegradationConfig,
    DegradationParams,
    apply_degradation,
    downsampled_size,
    resize,
    sample_degradation,
    substream,
)
from .detcodec import BoundingBox, clip_box

GENERATOR_VERSION = "aeris-datagen/1"
MANIFEST_FORMAT = "aeris-manifest"
MANIFEST_VERSION = 1
SHAPE_CLASSES = ("circle", "square", "triangle")
SUPERSAMPLE = 4


class CocoFormatError(ValueError):
    """Annotation file does not match the supported COCO subset."""


@dataclass
class AnnotationRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    boxes: list = field(default_factory=list)  # BoundingBox with class_id
    image: np.ndarray | None = None  # (H, W, 3) float32 in [0, 1]


@dataclass
class DatasetManifest:
    source: str
    seed: int
    generator_version: str = GENERATOR_VERSION
    config: dict | None = None
    params: dict = field(default_factory=dict)  # image_id -> DegradationParams

    def to_json(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "source": self.source,
            "seed": self.seed,
            "generator_version": self.generator_version,
            "config": self.config,
            "images": [
                {"image_id": int(k), "params": p.to_dict()} for k, p in sorted(self.params.items())
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise ValueError("not an aeris manifest")
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')}")
        params = {int(e["image_id"]): DegradationParams.from_dict(e["params"]) for e in d["images"]}
        return cls(d["source"], int(d["seed"]), d["generator_version"], d.get("config"), params)


@dataclass
class Dataset:
    records: list
    class_names: tuple = SHAPE_CLASSES
    manifest: DatasetManifest | None = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class SkipReport:
    dropped: list = field(default_factory=list)  # (annotation index, reason)
    crowd: int = 0
    missing_images: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def _value_noise(rng, hw, cells=8, amplitude=0.06):
    h, w = hw
    coarse = rng.uniform(-amplitude, amplitude, size=(cells + 1, cells + 1, 3))
    return resize(coarse, (h, w), "bicubic")


def shape_coverage(kind: str, x: int, y: int, size: int, hw, variant: int = 0) -> np.ndarray:
    """Anti-aliased coverage in ``[0, 1]`` of one shape whose tight box is ``(x, y, size, size)``.

    Pixel ``(i, j)`` spans ``[j, j+1) x [i, i+1)``; coverage is estimated by
    ``SUPERSAMPLE``^2 samples per pixel, boundaries inclusive.
    """
    h, w = hw
    cov = np.zeros((h, w))
    y0, y1 = max(y, 0), min(y + size, h)
    x0, x1 = max(x, 0), min(x + size, w)
    if y1 <= y0 or x1 <= x0:
        return cov
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys = (np.arange(y0, y1)[:, None] + sub[None, :]).ravel() - y
    xs = (np.arange(x0, x1)[:, None] + sub[None, :]).ravel() - x
    v, u = np.meshgrid(ys, xs, indexing="ij")  # local coords in [0, size]
    if kind == "circle":
        r = size / 2
        inside = (u - r) ** 2 + (v - r) ** 2 <= r * r
    elif kind == "square":
        inside = np.ones_like(u, dtype=bool)
    elif kind == "triangle":
        # right isosceles triangle, legs on the box edges; variant picks the corner
        if variant & 1:
            u = size - u
        if variant & 2:
            v = size - v
        inside = u <= v
    else:
        raise ValueError(f"unknown shape {kind!r}")
    inside = inside.reshape(y1 - y0, SUPERSAMPLE, x1 - x0, SUPERSAMPLE)
    cov[y0:y1, x0:x1] = inside.mean(axis=(1, 3))
    return cov


def draw_shape(img: np.ndarray, kind: str, center, radius: int, color, variant: int = 0):
    """Composite one shape centred at ``center`` (x, y) with half-extent ``radius``.

    Returns ``(new_image, BoundingBox)``; the box is the analytic extent
    ``(cx - r, cy - r, 2r, 2r)`` clipped to the image.
    """
    h, w = img.shape[:2]
    cx, cy = int(center[0]), int(center[1])
    size = 2 * int(radius)
    cov = shape_coverage(kind, cx - radius, cy - radius, size, (h, w), variant)[:, :, None]
    out = (img * (1 - cov) + np.asarray(color, dtype=np.float64) * cov).astype(img.dtype)
    cls = SHAPE_CLASSES.index(kind) if kind in SHAPE_CLASSES else -1
    return out, clip_box(BoundingBox(float(cx - radius), float(cy - radius), float(size), float(size), cls), (h, w))


def _overlaps(box, others, margin=2):
    x, y, s = box
    for ox, oy, os_ in others:
        if x < ox + os_ + margin and ox < x + s + margin and y < oy + os_ + margin and oy < y + s + margin:
            return True
    return False


def render_shapes_image(rng, image_hw, classes=SHAPE_CLASSES, max_shapes=6):
    """One image with 1..max_shapes non-overlapping shapes; returns (image, boxes)."""
    h, w = image_hw
    base = rng.uniform(0.25, 0.75, size=3)
    img = np.clip(base + _value_noise(rng, (h, w)), 0, 1)
    n = int(rng.integers(1, max_shapes + 1))
    lo, hi = 6 * min(h, w) / 128, 0.86 * min(h, w)
    placed, boxes = [], []
    for _ in range(n):
        for _attempt in range(30):
            size = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
            size = max(4, min(size, min(h, w)))
            x = int(rng.integers(0, w - size + 1))
            y = int(rng.integers(0, h - size + 1))
            if not _overlaps((x, y, size), placed):
                break
        else:
            continue
        cls = int(rng.integers(len(classes)))
        color = rng.uniform(0, 1, size=3)
        # keep the shape visibly different from its surroundings
        while np.abs(color - base).max() < 0.3:
            color = rng.uniform(0, 1, size=3)
        variant = int(rng.integers(4))
        cov = shape_coverage(classes[cls], x, y, size, (h, w), variant)[:, :, None]
        img = img * (1 - cov) + color * cov
        placed.append((x, y, size))
        boxes.append(BoundingBox(float(x), float(y), float(size), float(size), cls))
    return img.astype(np.float32), boxes


def gen_shapes(n_images: int, image_hw=(128, 128), classes=SHAPE_CLASSES, seed: int = 0) -> Dataset:
    """Synthetic detection set; image ``i`` depends only on ``(seed, i)``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    h, w = image_hw
    records = []
    for i in range(n_images):
        img, boxes = render_shapes_image(substream(seed, i), (h, w), classes)
        records.append(AnnotationRecord(i, f"{i:06d}.png", w, h, boxes, img))
    return Dataset(records, tuple(classes), DatasetManifest("shapes", seed))


# ---------------------------------------------------------------------------
# degraded sets
# ---------------------------------------------------------------------------


PRESETS = {
    "multi": dict(kind_probs=(0.0, 0.5, 0.5)),
    "noise15": dict(kind_probs=(1.0, 0.0, 0.0), sigma_choices=(15 / 255,), scale=(1.0, 1.0)),
    "noise25": dict(kind_probs=(1.0, 0.0, 0.0), sigma_choices=(25 / 255,), scale=(1.0, 1.0)),
    "noise50": dict(kind_probs=(1.0, 0.0, 0.0), sigma_choices=(50 / 255,), scale=(1.0, 1.0)),
    "noise-mix": dict(kind_probs=(1.0, 0.0, 0.0), sigma=(5 / 255, 50 / 255), scale=(1.0, 1.0)),
    "blur-mix": dict(kind_probs=(0.0, 0.5, 0.5), sigma=(0.0, 0.0), scale=(1.0, 1.0)),
    "down2": dict(kind_probs=(1.0, 0.0, 0.0), sigma=(0.0, 0.0), scale_choices=(2.0,), methods=("bicubic",)),
    "down4": dict(kind_probs=(1.0, 0.0, 0.0), sigma=(0.0, 0.0), scale_choices=(4.0,), methods=("bicubic",)),
}


def preset_config(name: str, seed: int = 0) -> DegradationConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return DegradationConfig(seed=seed, **PRESETS[name])


def scale_boxes(boxes, scale: float, image_hw) -> list:
    """Map HR boxes into an image down-sampled by ``scale`` and clip to its bounds."""
    out = []
    for b in boxes:
        c = clip_box(BoundingBox(b.x / scale, b.y / scale, b.w / scale, b.h / scale, b.class_id), image_hw)
        if c is not None:
            out.append(c)
    return out


def degrade_record(rec: AnnotationRecord, params: DegradationParams, seed: int) -> AnnotationRecord:
    img = apply_degradation(rec.image, params, substream(seed, rec.image_id, 1))
    h, w = img.shape[:2]
    boxes = scale_boxes(rec.boxes, params.scale, (h, w))
    return AnnotationRecord(rec.image_id, rec.file_name, w, h, boxes, img.astype(np.float32))


def build_degraded_set(dataset: Dataset, config: DegradationConfig, seed: int | None = None) -> Dataset:
    """Degrade every image with its own parameters; the manifest records them all.

    Parameters for image ``id`` come from substream ``(seed, id, 0)`` and the
    noise realisation from ``(seed, id, 1)``, so the result is independent of
    processing order.
    """
    seed = config.seed if seed is None else seed
    params, records = {}, []
    for rec in dataset.records:
        p = sample_degradation(config, substream(seed, rec.image_id, 0))
        params[rec.image_id] = p
        records.append(degrade_record(rec, p, seed))
    manifest = DatasetManifest(
        source=dataset.manifest.source if dataset.manifest else "unknown",
        seed=seed,
        config=config.to_dict(),
        params=params,
    )
    return Dataset(records, dataset.class_names, manifest)


def replay_manifest(dataset: Dataset, manifest: DatasetManifest) -> Dataset:
    """Rebuild a degraded set from its source images and a manifest."""
    ids = {r.image_id for r in dataset.records}
    if ids != set(manifest.params):
        raise ValueError("manifest image ids do not match the dataset")
    records = [degrade_record(r, manifest.params[r.image_id], manifest.seed) for r in dataset.records]
    return Dataset(records, dataset.class_names, manifest)


# ---------------------------------------------------------------------------
# COCO-style I/O
# ---------------------------------------------------------------------------


def to_coco_json(dataset: Dataset) -> dict:
    images, anns = [], []
    for rec in dataset.records:
        images.append({"id": rec.image_id, "file_name": rec.file_name, "width": rec.width, "height": rec.height})
        for b in rec.boxes:
            anns.append({
                "id": len(anns) + 1,
                "image_id": rec.image_id,
                "category_id": b.class_id + 1,
                "bbox": [b.x, b.y, b.w, b.h],
                "area": b.w * b.h,
                "iscrowd": 0,
            })
    cats = [{"id": i + 1, "name": n} for i, n in enumerate(dataset.class_names)]
    return {"images": images, "annotations": anns, "categories": cats}


def _require(obj, key, where, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise CocoFormatError(f"{where}: missing required field {key!r}")
    v = obj[key]
    if kind is float:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    else:
        ok = isinstance(v, kind) and not isinstance(v, bool)
    if not ok:
        raise CocoFormatError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {v!r}")
    return v


def parse_coco(data: dict) -> tuple[Dataset, SkipReport]:
    if not isinstance(data, dict):
        raise CocoFormatError("<root>: expected a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise CocoFormatError(f"<root>: field {key!r} must be a list")
    cats = []
    for i, c in enumerate(data["categories"]):
        cats.append((_require(c, "id", f"categories[{i}]", int), _require(c, "name", f"categories[{i}]", str)))
    cats.sort()
    cat_index = {cid: k for k, (cid, _) in enumerate(cats)}
    records, by_id = [], {}
    for i, im in enumerate(data["images"]):
        where = f"images[{i}]"
        rec = AnnotationRecord(
            _require(im, "id", where, int),
            _require(im, "file_name", where, str),
            _require(im, "width", where, int),
            _require(im, "height", where, int),
        )
        if rec.image_id in by_id:
            raise CocoFormatError(f"{where}.id: duplicate image id {rec.image_id}")
        by_id[rec.image_id] = rec
        records.append(rec)
    report = SkipReport()
    for i, a in enumerate(data["annotations"]):
        where = f"annotations[{i}]"
        img_id = _require(a, "image_id", where, int)
        cat = _require(a, "category_id", where, int)
        bbox = _require(a, "bbox", where, list)
        if len(bbox) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox):
            raise CocoFormatError(f"{where}.bbox: expected four numbers, got {bbox!r}")
        if a.get("iscrowd", 0):
            report.crowd += 1
            continue
        if img_id not in by_id:
            raise CocoFormatError(f"{where}.image_id: unknown image {img_id}")
        if cat not in cat_index:
            raise CocoFormatError(f"{where}.category_id: unknown category {cat}")
        x, y, w, h = (float(v) for v in bbox)
        if not (w > 0 and h > 0):
            report.dropped.append((i, "non-positive width or height"))
            continue
        rec = by_id[img_id]
        box = clip_box(BoundingBox(x, y, w, h, cat_index[cat]), (rec.height, rec.width))
        if box is None:
            report.dropped.append((i, "box outside image"))
            continue
        rec.boxes.append(box)
    return Dataset(records, tuple(n for _, n in cats)), report


def load_coco_json(path, image_dir=None, load_images: bool = False) -> tuple[Dataset, SkipReport]:
    """Parse a COCO-style annotation file.

    With ``load_images``, pixels are read from ``image_dir`` (default: the
    ``images`` directory next to the file); missing files are listed in the
    skip report and their records dropped.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    dataset, report = parse_coco(data)
    if load_images:
        image_dir = Path(image_dir) if image_dir else path.parent / "images"
        kept = []
        for rec in dataset.records:
            f = image_dir / rec.file_name
            if not f.is_file():
                report.missing_images.append(rec.file_name)
                continue
            rec.image = read_image(f)
            kept.append(rec)
        dataset.records = kept
    return dataset, report


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """8-bit storage quantisation, round-half-even."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(dataset: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        if rec.image is None:
            raise ValueError(f"record {rec.image_id} has no pixels to write")
        Image.fromarray(quantize(rec.image)).save(root / "images" / rec.file_name)
    (root / "annotations.json").write_text(json.dumps(to_coco_json(dataset), indent=1))
    if dataset.manifest is not None:
        save_manifest(dataset.manifest, root / "manifest.json")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    dataset, report = load_coco_json(root / "annotations.json", root / "images", load_images=True)
    if report.missing_images:
        raise FileNotFoundError(f"{len(report.missing_images)} image files missing under {root / 'images'}")
    mf = root / "manifest.json"
    if mf.is_file():
        dataset.manifest = load_manifest(mf)
    return dataset


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + os.linesep)


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_json(json.loads(Path(path).read_text()))
