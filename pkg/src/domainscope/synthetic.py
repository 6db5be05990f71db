"""Synthetic COCO corpora with planted domain properties.

Each image gets one value per planted factor:

* clarity: crisp blocky texture or a blurred, hazed copy (visibility
  high/low, background complex/simple)
* light: dark or bright base luminance
* cast: blue, neutral or green channel balance
* objects: none, 15 tiny boxes or 15 large boxes
* depth: flat or a diagonal ramp (upright/nadir vs rotated/front)

Box annotations are placed independently of the pixel content.  Run
``python -m domainscope.synthetic OUT_DIR`` to write a corpus.
"""

from __future__ import annotations

import argparse
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset_io import Detection, atomic_write_text, write_depth_png, write_dmap
from .scene import BoundingBox

CLASS_NAMES = ("holothurian", "echinus", "scallop", "starfish")
TEXTURE_AMPLITUDE = 35.0
TEXTURE_BLOCK = 6

# channel bases on [0, 1] for (cast, light)
CHANNEL_BASES = {
    ("natural", "dark"): (65 / 255, 65 / 255, 65 / 255),
    ("natural", "bright"): (175 / 255, 175 / 255, 175 / 255),
    ("blue", "dark"): (0.12, 0.30, 0.75),
    ("blue", "bright"): (0.10, 0.72, 0.88),
    ("green", "dark"): (0.08, 0.55, 0.12),
    ("green", "bright"): (0.20, 0.85, 0.30),
}

FACTORS = {
    "clarity": ("sharp", "blurred"),
    "light": ("dark", "bright"),
    "cast": ("blue", "natural", "green"),
    "objects": ("none", "tiny", "large"),
    "depth": ("flat", "ramped"),
}


@dataclass
class SyntheticImage:
    image_id: int
    file_name: str
    factors: dict[str, str]
    boxes: list[BoundingBox]
    rgb: np.ndarray
    depth: np.ndarray

    @property
    def planted(self) -> dict[str, str]:
        """Expected category labels implied by the planted factors."""
        f = self.factors
        out = {
            "visibility": "high" if f["clarity"] == "sharp" else "low",
            "background": "complex" if f["clarity"] == "sharp" else "simple",
            "illumination": f["light"],
            "color": f["cast"],
            "layout": "sparse" if f["objects"] == "none" else "crowded",
            "orientation": "upright" if f["depth"] == "flat" else "rotated",
            "perspective": "nadir" if f["depth"] == "flat" else "front",
        }
        if f["objects"] != "none":
            out["scale"] = "small" if f["objects"] == "tiny" else "large"
        return out


def _texture(rng: np.random.Generator, width: int, height: int, sharp: bool) -> np.ndarray:
    bh = -(-height // TEXTURE_BLOCK)
    bw = -(-width // TEXTURE_BLOCK)
    blocks = rng.uniform(-1.0, 1.0, size=(bh, bw))
    tex = np.kron(blocks, np.ones((TEXTURE_BLOCK, TEXTURE_BLOCK)))[:height, :width]
    tex = tex + 0.25 * rng.uniform(-1.0, 1.0, size=(height, width))
    if sharp:
        return TEXTURE_AMPLITUDE * tex
    return 0.3 * TEXTURE_AMPLITUDE * ndimage.gaussian_filter(tex, sigma=4.0, mode="nearest")


def _boxes(rng: np.random.Generator, kind: str, width: int, height: int) -> list[BoundingBox]:
    if kind == "none":
        return []
    side = 3 if kind == "tiny" else int(np.ceil(np.sqrt(0.03 * width * height)))
    out = []
    for _ in range(15):
        x = int(rng.integers(0, width - side + 1))
        y = int(rng.integers(0, height - side + 1))
        out.append(BoundingBox(float(x), float(y), float(side), float(side), int(rng.integers(1, 5))))
    return out


def _depth(kind: str, width: int, height: int) -> np.ndarray:
    if kind == "flat":
        return np.full((height, width), 5.0)
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    return 2.0 + 8.0 * xs[None, :] + 12.0 * ys[:, None]


def render(image_id: int, factors: dict[str, str], rng: np.random.Generator,
           width: int = 112, height: int = 96) -> SyntheticImage:
    tex = _texture(rng, width, height, factors["clarity"] == "sharp")
    base = np.array(CHANNEL_BASES[(factors["cast"], factors["light"])]) * 255.0
    rgb = np.clip(np.rint(base[None, None, :] + tex[..., None]), 0, 255).astype(np.uint8)
    return SyntheticImage(image_id, f"{image_id:05d}.png", dict(factors),
                          _boxes(rng, factors["objects"], width, height), rgb,
                          _depth(factors["depth"], width, height))


def generate(n_images: int, seed: int = 0, width: int = 112, height: int = 96) -> list[SyntheticImage]:
    """``n_images`` images cycling through a shuffled full factorial design."""
    rng = np.random.default_rng(seed)
    combos = [dict(zip(FACTORS, values)) for values in itertools.product(*FACTORS.values())]
    out = []
    order: list[int] = []
    for i in range(n_images):
        if not order:
            order = list(rng.permutation(len(combos)))
        out.append(render(i + 1, combos[order.pop()], rng, width, height))
    return out


def coco_document(images: list[SyntheticImage]) -> dict:
    doc = {
        "images": [],
        "annotations": [],
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(CLASS_NAMES)],
    }
    ann_id = 1
    for im in images:
        h, w = im.rgb.shape[:2]
        doc["images"].append({"id": im.image_id, "file_name": im.file_name, "width": w, "height": h})
        for b in im.boxes:
            doc["annotations"].append({"id": ann_id, "image_id": im.image_id, "category_id": b.category_id,
                                       "bbox": [b.x, b.y, b.w, b.h], "area": b.area, "iscrowd": 0})
            ann_id += 1
    return doc


def write_corpus(out_dir: str | Path, images: list[SyntheticImage], depth_png_scale: float = 1000.0) -> dict[str, Path]:
    """Write images/, depth/ (even ids DMAP, odd ids 16-bit PNG), annotations.json, planted.jsonl."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(exist_ok=True)
    for im in images:
        Image.fromarray(im.rgb).save(out_dir / "images" / im.file_name)
        if im.image_id % 2 == 0:
            write_dmap(out_dir / "depth" / f"{im.image_id}.dmap", im.depth)
        else:
            write_depth_png(out_dir / "depth" / f"{im.image_id}.png", im.depth, depth_png_scale)
    atomic_write_text(out_dir / "annotations.json", json.dumps(coco_document(images)) + "\n")
    atomic_write_text(out_dir / "planted.jsonl", "".join(
        json.dumps({"image_id": im.image_id, "factors": im.factors, "labels": im.planted}) + "\n"
        for im in images))
    return {"annotations": out_dir / "annotations.json", "images": out_dir / "images",
            "depth": out_dir / "depth", "planted": out_dir / "planted.jsonl"}


def synthetic_detections(gts: dict[int, list[BoundingBox]], image_ids, seed: int = 0,
                         miss_rate: float = 0.0, jitter: float = 0.0,
                         extra_fp: dict[int, int] | None = None, fp_score: float = 0.6,
                         width: int = 112, height: int = 96) -> dict[int, list[Detection]]:
    """A simulated detector: one detection per kept ground truth plus injected false positives.

    ``extra_fp`` maps image id to the number of spurious boxes (score
    ``fp_score``), using a class absent from the image where possible.
    """
    rng = np.random.default_rng(seed)
    extra_fp = extra_fp or {}
    out: dict[int, list[Detection]] = {}
    for image_id in image_ids:
        dets = []
        for g in gts.get(image_id, []):
            if rng.random() < miss_rate:
                continue
            dx, dy = rng.uniform(-jitter, jitter, size=2) * np.array([g.w, g.h])
            score = float(np.round(rng.uniform(0.7, 1.0), 4))
            dets.append(Detection(BoundingBox(g.x + dx, g.y + dy, g.w, g.h, g.category_id), score))
        for _ in range(extra_fp.get(image_id, 0)):
            side = 6.0
            x = float(rng.integers(0, width - 6))
            y = float(rng.integers(0, height - 6))
            # a class absent from the image can never match
            present = {g.category_id for g in gts.get(image_id, [])}
            free = [c for c in range(1, len(CLASS_NAMES) + 1) if c not in present]
            cid = free[0] if free else 1
            box = BoundingBox(x, y, side, side, cid)
            dets.append(Detection(box, fp_score))
        out[image_id] = dets
    return out


def detections_document(dets: dict[int, list[Detection]]) -> list[dict]:
    return [{"image_id": image_id, "category_id": d.category_id,
             "bbox": [d.box.x, d.box.y, d.box.w, d.box.h], "score": d.score}
            for image_id, items in sorted(dets.items()) for d in items]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m domainscope.synthetic",
                                description="Write a synthetic corpus with planted domain properties.")
    p.add_argument("out_dir", type=Path)
    p.add_argument("-n", "--images", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--detections", action="store_true", help="also write detections.json from a simulated detector")
    args = p.parse_args(argv)
    images = generate(args.images, args.seed)
    paths = write_corpus(args.out_dir, images)
    if args.detections:
        gts = {im.image_id: im.boxes for im in images}
        dets = synthetic_detections(gts, [im.image_id for im in images], seed=args.seed,
                                    miss_rate=0.1, jitter=0.1)
        atomic_write_text(args.out_dir / "detections.json", json.dumps(detections_document(dets)) + "\n")
    print(f"wrote {len(images)} images to {paths['images']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
