"""Scene-composition metrics: layout, object scale and background complexity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import vision_ops
from .calibration import CalibrationProfile, Thresholds

BACKGROUND_COMPONENTS = ("keypoint_density", "edge_density", "laplacian_mean")


class BackgroundTooSmall(ValueError):
    """Fewer background pixels than the profile's minimum fraction."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    category_id: int = 0

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def pixel_span(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Half-open pixel ranges (x0, x1, y0, y1) whose pixel centres lie inside the box."""
        x0 = max(0, math.ceil(self.x - 0.5))
        x1 = min(width, math.ceil(self.x2 - 0.5))
        y0 = max(0, math.ceil(self.y - 0.5))
        y1 = min(height, math.ceil(self.y2 - 0.5))
        return x0, x1, y0, y1


@dataclass(frozen=True)
class LayoutMetrics:
    object_count: int
    coverage: float
    overlap: float


@dataclass(frozen=True)
class ScaleMetrics:
    mean_norm_area: float
    small_ratio: float
    large_ratio: float


@dataclass(frozen=True)
class BackgroundMetrics:
    keypoint_density: float
    edge_density: float
    laplacian_mean: float
    score: float


def foreground_mask(boxes: Sequence[BoundingBox], width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        x0, x1, y0, y1 = b.pixel_span(width, height)
        mask[y0:y1, x0:x1] = True
    return mask


def background_mask(boxes: Sequence[BoundingBox], width: int, height: int) -> np.ndarray:
    """True exactly for pixels not covered by any box."""
    return ~foreground_mask(boxes, width, height)


def pairwise_overlap_area(boxes: Sequence[BoundingBox]) -> float:
    """Sum of intersection areas over unordered box pairs."""
    if len(boxes) < 2:
        return 0.0
    a = np.array([(b.x, b.y, b.x2, b.y2) for b in boxes], dtype=np.float64)
    iw = np.minimum(a[:, None, 2], a[None, :, 2]) - np.maximum(a[:, None, 0], a[None, :, 0])
    ih = np.minimum(a[:, None, 3], a[None, :, 3]) - np.maximum(a[:, None, 1], a[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return float(np.triu(inter, k=1).sum())


def compute_layout(boxes: Sequence[BoundingBox], width: int, height: int) -> LayoutMetrics:
    if width <= 0 or height <= 0:
        raise ValueError("image must have positive area")
    n = len(boxes)
    if n == 0:
        return LayoutMetrics(0, 0.0, 0.0)
    coverage = np.count_nonzero(foreground_mask(boxes, width, height)) / (width * height)
    total = sum(b.area for b in boxes)
    overlap = pairwise_overlap_area(boxes) / total if n > 1 and total > 0 else 0.0
    return LayoutMetrics(n, float(coverage), overlap)


def classify_layout(m: LayoutMetrics, t: Thresholds = Thresholds()) -> str:
    if (m.object_count >= t.layout_crowded_count or m.coverage > t.layout_crowded_coverage
            or m.overlap > t.layout_crowded_overlap):
        return "crowded"
    if (m.object_count <= t.layout_sparse_count and m.coverage < t.layout_sparse_coverage
            and m.overlap < t.layout_sparse_overlap):
        return "sparse"
    return "moderate"


def compute_scale(boxes: Sequence[BoundingBox], image_area: float,
                  t: Thresholds = Thresholds()) -> ScaleMetrics | None:
    if image_area <= 0:
        raise ValueError("image must have positive area")
    if not boxes:
        return None
    areas = np.array([b.area for b in boxes], dtype=np.float64) / image_area
    return ScaleMetrics(
        mean_norm_area=float(areas.mean()),
        small_ratio=float(np.count_nonzero(areas < t.scale_small_area) / len(areas)),
        large_ratio=float(np.count_nonzero(areas > t.scale_large_area) / len(areas)),
    )


def classify_scale(m: ScaleMetrics, t: Thresholds = Thresholds()) -> str:
    small = m.small_ratio >= t.scale_ratio or m.mean_norm_area < t.scale_small_area
    large = m.large_ratio >= t.scale_ratio or m.mean_norm_area > t.scale_large_area
    if small and large:
        if m.small_ratio > m.large_ratio:
            return "small"
        if m.large_ratio > m.small_ratio:
            return "large"
        return "medium"
    if small:
        return "small"
    if large:
        return "large"
    return "medium"


def background_raw(gray: np.ndarray, mask: np.ndarray, profile: CalibrationProfile) -> dict[str, float]:
    gray = np.asarray(gray, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gray.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {gray.shape}")
    n_bg = int(np.count_nonzero(mask))
    if n_bg == 0 or n_bg < profile.min_background_fraction * mask.size:
        raise BackgroundTooSmall(f"only {n_bg} of {mask.size} pixels are background")
    kps = vision_ops.fast_keypoints(gray, profile.fast_threshold)
    n_kp = int(np.count_nonzero(mask[kps[:, 1], kps[:, 0]])) if len(kps) else 0
    edges = vision_ops.canny_edges(gray, profile.canny_low, profile.canny_high, profile.canny_sigma)
    lap = vision_ops.laplacian(gray)
    return {
        "keypoint_density": n_kp / (n_bg / 1e6),
        "edge_density": float(np.count_nonzero(edges & mask) / n_bg),
        "laplacian_mean": float(np.abs(lap[mask]).mean()),
    }


def background_score(raw: dict[str, float], profile: CalibrationProfile) -> float:
    normalized = [profile.normalize(name, raw[name]) for name in BACKGROUND_COMPONENTS]
    score = sum(w * v for w, v in zip(profile.background_weights, normalized))
    return min(1.0, max(0.0, score))


def compute_background(gray: np.ndarray, mask: np.ndarray, profile: CalibrationProfile) -> BackgroundMetrics:
    raw = background_raw(gray, mask, profile)
    return BackgroundMetrics(**raw, score=background_score(raw, profile))


def classify_background(score: float, t: Thresholds = Thresholds()) -> str:
    if score < t.background_simple:
        return "simple"
    if score > t.background_complex:
        return "complex"
    return "textured"
