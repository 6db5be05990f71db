"""Per-image labeling and the dataset-level labeling job."""

from __future__ import annotations

import io
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import appearance, geometry, scene, vision_ops
from .calibration import CalibrationProfile
from .dataset_io import DatasetError, DatasetIndex, ImageEntry, find_depth, load_depth, load_image
from .geometry import DepthMap
from .labels import (AXES, BACKGROUND_TOO_SMALL, CATEGORIES, CATEGORY_LABELS, NO_DEPTH,
                     NO_OBJECTS, REGION_UNDERPOPULATED, UNLABELED, DomainLabelRecord)
from .scene import BoundingBox

log = logging.getLogger(__name__)

DEPTH_UNREADABLE = "depth_unreadable"


class DataQualityError(RuntimeError):
    """Too many images failed to decode for the run to be trusted."""

    def __init__(self, message: str, failures: Sequence[tuple[int, str]]):
        super().__init__(message)
        self.failures = list(failures)


def compute_raw_metrics(rgb: np.ndarray, boxes: Sequence[BoundingBox], depth: DepthMap | None,
                        profile: CalibrationProfile,
                        depth_reason: str = NO_DEPTH) -> tuple[dict[str, float | None], dict[str, str]]:
    """Every profile-normalization-independent metric of one image.

    Returns the metric dict and the reasons for categories that cannot be
    measured on this image.
    """
    gray = vision_ops.to_grayscale(rgb)
    h, w = gray.shape
    metrics: dict[str, float | None] = {}
    reasons: dict[str, str] = {}

    metrics.update(appearance.visibility_raw(gray, profile.freq_cutoff))
    illum = appearance.compute_illumination(gray, profile)
    metrics.update(median_luminance=illum.median_luminance,
                   overexposed_ratio=illum.overexposed_ratio,
                   underexposed_ratio=illum.underexposed_ratio)
    color = appearance.compute_color(rgb)
    metrics.update(mean_r=color.mean_r, mean_g=color.mean_g, mean_b=color.mean_b,
                   color_distortion=color.distortion, blue_green_ratio=color.blue_green_ratio)

    layout = scene.compute_layout(boxes, w, h)
    metrics.update(object_count=layout.object_count, coverage=layout.coverage, overlap=layout.overlap)
    sc = scene.compute_scale(boxes, w * h, profile.thresholds)
    if sc is None:
        reasons["scale"] = NO_OBJECTS
    else:
        metrics.update(mean_norm_area=sc.mean_norm_area, small_ratio=sc.small_ratio,
                       large_ratio=sc.large_ratio)

    bg_mask = scene.background_mask(boxes, w, h)
    try:
        metrics.update(scene.background_raw(gray, bg_mask, profile))
    except scene.BackgroundTooSmall:
        reasons["background"] = BACKGROUND_TOO_SMALL

    top, bottom = geometry.half_masks(h, profile.split_fraction)
    metrics["brightness_gradient"] = float(gray[top].mean() - gray[bottom].mean())
    if depth is None:
        reasons["orientation"] = reasons["perspective"] = depth_reason
    else:
        try:
            geo = geometry.compute_geometry(depth, gray, bg_mask, profile)
        except geometry.RegionUnderpopulated:
            reasons["orientation"] = reasons["perspective"] = REGION_UNDERPOPULATED
        else:
            metrics.update(delta_lr=geo.delta_lr, delta_tb=geo.delta_tb, depth_range=geo.depth_range)
    return metrics, reasons


def classify_metrics(metrics: Mapping[str, float | None], profile: CalibrationProfile,
                     reasons: Mapping[str, str] | None = None
                     ) -> tuple[dict[str, str], dict[str, str], dict[str, float]]:
    """Apply normalization, scores and every threshold rule to raw metrics.

    Returns (labels, reasons, derived scores).  Categories named in
    ``reasons`` stay unlabeled.
    """
    t = profile.thresholds
    reasons = dict(reasons or {})
    labels: dict[str, str] = {}
    derived: dict[str, float] = {}
    m = metrics

    vis = appearance.visibility_score(m, profile)
    derived["visibility_score"] = vis
    labels["visibility"] = appearance.classify_visibility(vis, t)
    labels["illumination"] = appearance.classify_illumination(
        appearance.IlluminationMetrics(m["median_luminance"], m["overexposed_ratio"], m["underexposed_ratio"]), t)
    labels["color"] = appearance.classify_color(
        appearance.ColorMetrics(m["mean_r"], m["mean_g"], m["mean_b"], m["color_distortion"],
                                m["blue_green_ratio"]), t)
    labels["layout"] = scene.classify_layout(
        scene.LayoutMetrics(int(m["object_count"]), m["coverage"], m["overlap"]), t)
    if "scale" not in reasons:
        labels["scale"] = scene.classify_scale(
            scene.ScaleMetrics(m["mean_norm_area"], m["small_ratio"], m["large_ratio"]), t)
    if "background" not in reasons:
        bg = scene.background_score(m, profile)
        derived["background_score"] = bg
        labels["background"] = scene.classify_background(bg, t)
    if "orientation" not in reasons:
        geo = geometry.GeometryMetrics(m["delta_lr"], m["delta_tb"], m["depth_range"], m["brightness_gradient"])
        labels["orientation"] = geometry.classify_orientation(geo, t)
        labels["perspective"] = geometry.classify_perspective(geo, t)
    for cat in CATEGORIES:
        if cat in reasons:
            labels[cat] = UNLABELED
    return {c: labels[c] for c in CATEGORIES}, reasons, derived


def record_from_metrics(image_id: int, metrics: Mapping[str, float | None], reasons: Mapping[str, str],
                        profile: CalibrationProfile) -> DomainLabelRecord:
    labels, reasons, derived = classify_metrics(metrics, profile, reasons)
    return DomainLabelRecord(image_id=image_id, labels=labels, reasons=reasons,
                             metrics={**metrics, **derived}, profile_id=profile.profile_id)


def label_image(rgb: np.ndarray, boxes: Sequence[BoundingBox], depth: DepthMap | None,
                profile: CalibrationProfile, image_id: int = 0) -> DomainLabelRecord:
    metrics, reasons = compute_raw_metrics(rgb, boxes, depth, profile)
    return record_from_metrics(image_id, metrics, reasons, profile)


# -- dataset jobs -------------------------------------------------------------------

@dataclass
class LabelingJob:
    dataset: DatasetIndex
    profile: CalibrationProfile
    depth_root: Path | None = None
    worker_count: int = 1

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be at least 1")


def _measure_entry(args) -> tuple[int, dict | None, dict | None, str | None]:
    entry, boxes, depth_path, profile = args
    try:
        rgb = load_image(entry.path)
    except DatasetError as exc:
        return entry.image_id, None, None, str(exc)
    h, w = rgb.shape[:2]
    if (w, h) != (entry.width, entry.height):
        return entry.image_id, None, None, (
            f"{entry.path}: decoded size {w}x{h} differs from annotated {entry.width}x{entry.height}")
    depth, depth_reason = None, NO_DEPTH
    if depth_path is not None:
        try:
            depth = load_depth(depth_path, w, h, profile)
        except DatasetError as exc:
            log.warning("%s", exc)
            depth_reason = DEPTH_UNREADABLE
    metrics, reasons = compute_raw_metrics(rgb, boxes, depth, profile, depth_reason)
    return entry.image_id, metrics, reasons, None


def measure_dataset(dataset: DatasetIndex, profile: CalibrationProfile, depth_root: Path | None = None,
                    worker_count: int = 1) -> tuple[list[tuple[int, dict, dict]], list[tuple[int, str]]]:
    """Raw metrics for every decodable image, in dataset order."""
    tasks = [(entry, dataset.boxes(entry.image_id), find_depth(depth_root, entry.image_id), profile)
             for entry in dataset.images]
    if worker_count == 1 or len(tasks) < 2:
        results = list(map(_measure_entry, tasks))
    else:
        chunk = max(1, len(tasks) // (worker_count * 4))
        with ProcessPoolExecutor(max_workers=worker_count) as pool:
            results = list(pool.map(_measure_entry, tasks, chunksize=chunk))
    measured, failures = [], []
    for image_id, metrics, reasons, error in results:
        if error is not None:
            failures.append((image_id, error))
        else:
            measured.append((image_id, metrics, reasons))
    return measured, failures


@dataclass
class LabelSummary:
    n_images: int
    counts: dict[str, dict[str, int]]
    unlabeled: dict[str, dict[str, int]]
    failures: list[tuple[int, str]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[DomainLabelRecord],
                     failures: Sequence[tuple[int, str]] = ()) -> LabelSummary:
        counts = {c: {lab: 0 for lab in CATEGORY_LABELS[c]} for c in CATEGORIES}
        unlabeled: dict[str, dict[str, int]] = {c: {} for c in CATEGORIES}
        for r in records:
            for c in CATEGORIES:
                lab = r.label(c)
                if lab == UNLABELED:
                    reason = r.reasons.get(c, "unknown")
                    unlabeled[c][reason] = unlabeled[c].get(reason, 0) + 1
                else:
                    counts[c][lab] += 1
        return cls(len(records), counts, unlabeled, list(failures))

    def percentages(self, category: str) -> dict[str, float]:
        total = sum(self.counts[category].values())
        if total == 0:
            return {lab: 0.0 for lab in self.counts[category]}
        return {lab: 100.0 * n / total for lab, n in self.counts[category].items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "category", "label", "count", "percent"])
        for axis, cats in AXES.items():
            for c in cats:
                pct = self.percentages(c)
                for lab, n in self.counts[c].items():
                    w.writerow([axis, c, lab, n, f"{pct[lab]:.2f}"])
                for reason, n in sorted(self.unlabeled[c].items()):
                    w.writerow([axis, c, f"{UNLABELED}:{reason}", n, ""])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"Domain label distribution ({self.n_images} images, {len(self.failures)} failed)"]
        for axis, cats in AXES.items():
            lines.append("")
            lines.append(axis.upper())
            for c in cats:
                pct = self.percentages(c)
                star = "*" if c == "color" else ""
                parts = "  ".join(f"{lab} {pct[lab]:5.1f}%" for lab in self.counts[c])
                extra = sum(self.unlabeled[c].values())
                tail = f"  (unlabeled {extra})" if extra else ""
                lines.append(f"  {c + star:<14}{parts}{tail}")
        return "\n".join(lines) + "\n"


def run_job(job: LabelingJob) -> tuple[list[DomainLabelRecord], LabelSummary]:
    measured, failures = measure_dataset(job.dataset, job.profile, job.depth_root, job.worker_count)
    n = len(job.dataset.images)
    if n and len(failures) / n > job.profile.max_failure_fraction:
        raise DataQualityError(
            f"{len(failures)} of {n} images failed to decode "
            f"(limit {job.profile.max_failure_fraction:.0%})", failures)
    for image_id, reason in failures:
        log.warning("image %s skipped: %s", image_id, reason)
    records = [record_from_metrics(image_id, metrics, reasons, job.profile)
               for image_id, metrics, reasons in measured]
    return records, LabelSummary.from_records(records, failures)
