"""Domain categories, their label vocabularies, and the per-image label record."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

SCHEMA_VERSION = "v1"
UNLABELED = "unlabeled"

AXES = {
    "appearance": ("visibility", "illumination", "color"),
    "scene": ("layout", "scale", "background"),
    "geometry": ("orientation", "perspective"),
}
CATEGORIES = tuple(c for cats in AXES.values() for c in cats)

# Ordered low -> high; color is the only unordered category.
CATEGORY_LABELS = {
    "visibility": ("low", "moderate", "high"),
    "illumination": ("dark", "medium", "bright"),
    "color": ("blue", "natural", "green"),
    "layout": ("sparse", "moderate", "crowded"),
    "scale": ("small", "medium", "large"),
    "background": ("simple", "textured", "complex"),
    "orientation": ("upright", "slightly_tilted", "rotated"),
    "perspective": ("nadir", "oblique", "front"),
}
UNORDERED = frozenset({"color"})

# Reasons attached to unlabeled categories.
NO_OBJECTS = "no_objects"
NO_DEPTH = "no_depth"
BACKGROUND_TOO_SMALL = "background_too_small"
REGION_UNDERPOPULATED = "region_underpopulated"

METRIC_KEYS = (
    "tenengrad", "laplacian_var", "rms_contrast", "freq_energy",
    "visibility_score",
    "median_luminance", "overexposed_ratio", "underexposed_ratio",
    "mean_r", "mean_g", "mean_b", "color_distortion", "blue_green_ratio",
    "object_count", "coverage", "overlap",
    "mean_norm_area", "small_ratio", "large_ratio",
    "keypoint_density", "edge_density", "laplacian_mean",
    "background_score",
    "delta_lr", "delta_tb", "depth_range", "brightness_gradient",
)


def axis_of(category: str) -> str:
    for axis, cats in AXES.items():
        if category in cats:
            return axis
    raise KeyError(category)


def endpoints(category: str) -> tuple[str, ...]:
    """Conditions evaluated for a category: both extremes, or all for color."""
    labels = CATEGORY_LABELS[category]
    if category in UNORDERED:
        return labels
    return labels[0], labels[-1]


@dataclass
class DomainLabelRecord:
    image_id: int
    labels: dict[str, str]
    reasons: dict[str, str] = field(default_factory=dict)
    metrics: dict[str, float | None] = field(default_factory=dict)
    profile_id: str = ""

    def label(self, category: str) -> str:
        return self.labels.get(category, UNLABELED)

    def is_labeled(self, category: str) -> bool:
        return self.label(category) != UNLABELED

    def to_json(self) -> dict[str, Any]:
        """Plain-JSON form with a fixed key order; infinities become strings."""
        return {
            "v": SCHEMA_VERSION,
            "image_id": self.image_id,
            "profile_id": self.profile_id,
            "labels": {c: self.label(c) for c in CATEGORIES},
            "reasons": {c: self.reasons[c] for c in CATEGORIES if c in self.reasons},
            "metrics": {k: _encode_float(self.metrics.get(k)) for k in METRIC_KEYS},
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> DomainLabelRecord:
        if obj.get("v") != SCHEMA_VERSION:
            raise ValueError(f"unsupported label schema version {obj.get('v')!r}")
        labels = dict(obj["labels"])
        for cat, lab in labels.items():
            if cat not in CATEGORY_LABELS:
                raise ValueError(f"unknown category {cat!r}")
            if lab != UNLABELED and lab not in CATEGORY_LABELS[cat]:
                raise ValueError(f"unknown {cat} label {lab!r}")
        return cls(
            image_id=int(obj["image_id"]),
            labels=labels,
            reasons=dict(obj.get("reasons", {})),
            metrics={k: _decode_float(v) for k, v in obj.get("metrics", {}).items() if v is not None},
            profile_id=obj.get("profile_id", ""),
        )


def _encode_float(value):
    if value is None:
        return None
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return None
    return value


def _decode_float(value) -> float:
    # float() also parses the "inf" / "-inf" strings written by _encode_float
    return float(value)
