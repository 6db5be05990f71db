"""Reading COCO ground truth, detections, images and depth rasters; writing labels.

Formats:

* ground truth: COCO JSON (``images``, ``annotations``, ``categories``;
  ``bbox = [x, y, w, h]``)
* detections: COCO results JSON, a list of
  ``{image_id, category_id, bbox, score}``
* depth: 16-bit grayscale PNG (value = depth x ``depth_png_scale``) or a
  DMAP raster: ``b"DMAP"``, u32 width, u32 height, u32 reserved, then
  width x height little-endian float32, row-major
* labels: JSON Lines, one :class:`DomainLabelRecord` per line
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .calibration import CalibrationProfile
from .geometry import DepthMap
from .labels import CATEGORIES, METRIC_KEYS, DomainLabelRecord
from .scene import BoundingBox

log = logging.getLogger(__name__)

DMAP_MAGIC = b"DMAP"
DMAP_HEADER = struct.Struct("<4sIII")
IMAGE_FORMATS = ("PNG", "JPEG")


class DatasetError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class ImageEntry:
    image_id: int
    file_name: str
    path: Path
    width: int
    height: int


@dataclass
class DatasetIndex:
    images: list[ImageEntry]
    categories: dict[int, str]
    annotations: dict[int, list[BoundingBox]]
    clamped: int = 0
    dropped: int = 0
    _by_id: dict[int, ImageEntry] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {im.image_id: im for im in self.images}

    def image(self, image_id: int) -> ImageEntry:
        return self._by_id[image_id]

    def __contains__(self, image_id: int) -> bool:
        return image_id in self._by_id

    @property
    def image_ids(self) -> list[int]:
        return [im.image_id for im in self.images]

    def boxes(self, image_id: int) -> list[BoundingBox]:
        return self.annotations.get(image_id, [])


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    @property
    def category_id(self) -> int:
        return self.box.category_id


DetectionSet = dict[int, list[Detection]]


def _read_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _field(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise DatasetError(f"{where}: missing field {key!r}") from None


def _parse_bbox(raw, where: str) -> tuple[float, float, float, float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise DatasetError(f"{where}: bbox must be [x, y, w, h]")
    try:
        return tuple(float(v) for v in raw)
    except (TypeError, ValueError):
        raise DatasetError(f"{where}: bbox values must be numbers") from None


def clamp_box(x: float, y: float, w: float, h: float, width: int, height: int) -> tuple[float, float, float, float]:
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(width), x + w), min(float(height), y + h)
    return x0, y0, x1 - x0, y1 - y0


def load_dataset(ann_path: str | Path, image_root: str | Path) -> DatasetIndex:
    data = _read_json(ann_path)
    if not isinstance(data, dict):
        raise DatasetError(f"{ann_path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise DatasetError(f"{ann_path}: {key!r} must be a list")
    image_root = Path(image_root)

    images: dict[int, ImageEntry] = {}
    for i, im in enumerate(data["images"]):
        where = f"{ann_path}: images[{i}]"
        image_id = int(_field(im, "id", where))
        if image_id in images:
            raise DatasetError(f"{where}: duplicate image id {image_id}")
        file_name = str(_field(im, "file_name", where))
        width, height = int(_field(im, "width", where)), int(_field(im, "height", where))
        if width <= 0 or height <= 0:
            raise DatasetError(f"{where}: non-positive image size {width}x{height}")
        images[image_id] = ImageEntry(image_id, file_name, image_root / file_name, width, height)

    categories: dict[int, str] = {}
    for i, cat in enumerate(data["categories"]):
        where = f"{ann_path}: categories[{i}]"
        cat_id = int(_field(cat, "id", where))
        if cat_id in categories:
            raise DatasetError(f"{where}: duplicate category id {cat_id}")
        categories[cat_id] = str(_field(cat, "name", where))

    pending: dict[int, list[tuple[Any, BoundingBox]]] = {}
    bad_images, bad_cats = set(), set()
    clamped = dropped = 0
    for i, ann in enumerate(data["annotations"]):
        where = f"{ann_path}: annotations[{i}]"
        image_id = int(_field(ann, "image_id", where))
        cat_id = int(_field(ann, "category_id", where))
        x, y, w, h = _parse_bbox(_field(ann, "bbox", where), where)
        if image_id not in images:
            bad_images.add(image_id)
            continue
        if cat_id not in categories:
            bad_cats.add(cat_id)
            continue
        im = images[image_id]
        cx, cy, cw, ch = clamp_box(x, y, w, h, im.width, im.height)
        if (cx, cy, cw, ch) != (x, y, w, h):
            clamped += 1
        if cw <= 0 or ch <= 0:
            dropped += 1
            continue
        pending.setdefault(image_id, []).append((int(ann.get("id", i)), BoundingBox(cx, cy, cw, ch, cat_id)))
    if bad_images or bad_cats:
        parts = []
        if bad_images:
            parts.append(f"unknown image_id(s) {sorted(bad_images)}")
        if bad_cats:
            parts.append(f"unknown category_id(s) {sorted(bad_cats)}")
        raise DatasetError(f"{ann_path}: annotations reference " + " and ".join(parts))
    if clamped:
        log.warning("%s: clamped %d box(es) into image bounds, dropped %d empty", ann_path, clamped, dropped)

    annotations = {
        image_id: [box for _, box in sorted(items, key=lambda t: t[0])]
        for image_id, items in pending.items()
    }
    ordered = [images[k] for k in sorted(images)]
    return DatasetIndex(ordered, dict(sorted(categories.items())), annotations, clamped, dropped)


def load_detections(path: str | Path, index: DatasetIndex) -> DetectionSet:
    data = _read_json(path)
    if not isinstance(data, list):
        raise DatasetError(f"{path}: detections must be a JSON list")
    out: DetectionSet = {}
    bad_images, bad_cats = set(), set()
    for i, det in enumerate(data):
        where = f"{path}: [{i}]"
        image_id = int(_field(det, "image_id", where))
        cat_id = int(_field(det, "category_id", where))
        x, y, w, h = _parse_bbox(_field(det, "bbox", where), where)
        score = float(_field(det, "score", where))
        if not 0.0 <= score <= 1.0:
            raise DatasetError(f"{where}: score {score} outside [0, 1]")
        if w <= 0 or h <= 0:
            raise DatasetError(f"{where}: non-positive box size")
        if image_id not in index:
            bad_images.add(image_id)
            continue
        if cat_id not in index.categories:
            bad_cats.add(cat_id)
            continue
        out.setdefault(image_id, []).append(Detection(BoundingBox(x, y, w, h, cat_id), score))
    if bad_images or bad_cats:
        parts = []
        if bad_images:
            parts.append(f"unknown image_id(s) {sorted(bad_images)}")
        if bad_cats:
            parts.append(f"unknown category_id(s) {sorted(bad_cats)}")
        raise DatasetError(f"{path}: detections reference " + " and ".join(parts))
    return out


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit PNG or baseline JPEG into an HxWx3 uint8 array."""
    try:
        with Image.open(path) as im:
            if im.format not in IMAGE_FORMATS:
                raise DatasetError(f"{path}: unsupported image format {im.format}")
            if im.mode not in ("L", "P", "RGB", "RGBA", "LA"):
                raise DatasetError(f"{path}: unsupported pixel mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"{path}: cannot decode image ({exc})") from None


def resize_bilinear(values: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resampling with corner pixels aligned; NaNs propagate."""
    h, w = values.shape
    if (h, w) == (height, width):
        return values.copy()
    if width <= 0 or height <= 0:
        raise DatasetError(f"cannot resample depth to {width}x{height}")
    ys = np.linspace(0.0, h - 1, height)
    xs = np.linspace(0.0, w - 1, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bottom = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def read_dmap(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < DMAP_HEADER.size:
        raise DatasetError(f"{path}: truncated DMAP header")
    magic, width, height, _ = DMAP_HEADER.unpack_from(raw)
    if magic != DMAP_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    expected = DMAP_HEADER.size + 4 * width * height
    if width == 0 or height == 0 or len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for {width}x{height}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=DMAP_HEADER.size)
    return data.reshape(height, width).astype(np.float64)


def write_dmap(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    height, width = values.shape
    _atomic_write_bytes(Path(path), DMAP_HEADER.pack(DMAP_MAGIC, width, height, 0) + values.tobytes())


def read_depth_png(path: str | Path, png_scale: float) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PNG" or im.mode not in ("I;16", "I;16B", "I"):
                raise DatasetError(f"{path}: depth PNG must be 16-bit grayscale, got {im.format} {im.mode}")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"{path}: cannot decode depth PNG ({exc})") from None
    return arr / png_scale


def write_depth_png(path: str | Path, values: np.ndarray, png_scale: float = 1000.0) -> None:
    scaled = np.clip(np.rint(np.asarray(values, dtype=np.float64) * png_scale), 0, 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(scaled).save(buf, format="PNG")
    _atomic_write_bytes(Path(path), buf.getvalue())


def load_depth(path: str | Path, target_w: int, target_h: int, profile: CalibrationProfile) -> DepthMap:
    path = Path(path)
    if path.suffix.lower() == ".png":
        values = read_depth_png(path, profile.depth_png_scale)
    else:
        try:
            values = read_dmap(path)
        except OSError as exc:
            raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    values = resize_bilinear(values * profile.depth_scale, target_w, target_h)
    return DepthMap(values)


def find_depth(depth_root: str | Path | None, image_id: int) -> Path | None:
    if depth_root is None:
        return None
    for suffix in (".dmap", ".png"):
        candidate = Path(depth_root) / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    return None


# -- writers ----------------------------------------------------------------------

def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def atomic_write_text(path: str | Path, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def labels_to_jsonl(records: Iterable[DomainLabelRecord]) -> str:
    return "".join(json.dumps(r.to_json(), separators=(",", ":"), allow_nan=False) + "\n" for r in records)


def write_labels(records: Iterable[DomainLabelRecord], path: str | Path) -> None:
    atomic_write_text(path, labels_to_jsonl(records))


def read_labels(path: str | Path) -> list[DomainLabelRecord]:
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(DomainLabelRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from None
    return records


def write_labels_csv(records: Iterable[DomainLabelRecord], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "profile_id", *CATEGORIES, *METRIC_KEYS])
    for r in records:
        row = [r.image_id, r.profile_id]
        row += [r.label(c) if r.is_labeled(c) else f"unlabeled:{r.reasons.get(c, '')}" for c in CATEGORIES]
        row += ["" if r.metrics.get(k) is None else repr(float(r.metrics[k])) for k in METRIC_KEYS]
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())
