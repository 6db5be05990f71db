"""Acquisition-geometry metrics from a precomputed relative depth map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationProfile, Thresholds


class RegionUnderpopulated(ValueError):
    """A half-image region has too few valid background depth samples."""


@dataclass
class DepthMap:
    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise ValueError(f"depth map must be a non-empty 2-D array, got shape {self.values.shape}")
        finite = np.isfinite(self.values)
        valid = finite if self.valid is None else (np.asarray(self.valid, dtype=bool) & finite)
        self.valid = valid

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class GeometryMetrics:
    delta_lr: float
    delta_tb: float
    depth_range: float
    brightness_gradient: float


def half_masks(length: int, fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Leading and trailing bands of an axis by pixel centre; a pixel centred
    exactly on the split belongs to neither, which keeps flips symmetric."""
    centres = np.arange(length) + 0.5
    return centres < fraction * length, centres > (1.0 - fraction) * length


def compute_geometry(depth: DepthMap, gray: np.ndarray, bg_mask: np.ndarray,
                     profile: CalibrationProfile) -> GeometryMetrics:
    gray = np.asarray(gray, dtype=np.float64)
    bg_mask = np.asarray(bg_mask, dtype=bool)
    if depth.shape != gray.shape or bg_mask.shape != gray.shape:
        raise ValueError(f"depth {depth.shape}, mask {bg_mask.shape} and image {gray.shape} differ in size")
    h, w = gray.shape
    usable = bg_mask & depth.valid
    left, right = half_masks(w, profile.split_fraction)
    top, bottom = half_masks(h, profile.split_fraction)

    def region_mean(sel: np.ndarray, name: str) -> float:
        vals = depth.values[sel]
        if vals.size < profile.min_region_pixels:
            raise RegionUnderpopulated(
                f"{name} region has {vals.size} valid background pixels, need {profile.min_region_pixels}")
        return float(vals.mean())

    d_left = region_mean(usable & left[None, :], "left")
    d_right = region_mean(usable & right[None, :], "right")
    d_top = region_mean(usable & top[:, None], "top")
    d_bottom = region_mean(usable & bottom[:, None], "bottom")

    vals = depth.values[usable]
    if profile.depth_trim is not None:
        lo, hi = np.percentile(vals, profile.depth_trim)
        depth_range = float(hi - lo)
    else:
        depth_range = float(vals.max() - vals.min())

    return GeometryMetrics(
        delta_lr=abs(d_left - d_right),
        delta_tb=abs(d_top - d_bottom),
        depth_range=max(0.0, depth_range),
        brightness_gradient=float(gray[top].mean() - gray[bottom].mean()),
    )


def classify_orientation(m: GeometryMetrics, t: Thresholds = Thresholds()) -> str:
    if m.delta_lr < t.orientation_upright:
        return "upright"
    if m.delta_lr > t.orientation_rotated:
        return "rotated"
    return "slightly_tilted"


def classify_perspective(m: GeometryMetrics, t: Thresholds = Thresholds()) -> str:
    if (m.delta_tb > t.perspective_front_tb or m.depth_range > t.perspective_front_range
            or m.brightness_gradient > t.perspective_front_brightness):
        return "front"
    if m.delta_tb < t.perspective_nadir_tb and m.depth_range < t.perspective_nadir_range:
        return "nadir"
    return "oblique"
