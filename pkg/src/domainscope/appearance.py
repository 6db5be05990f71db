"""Image-appearance metrics: visibility, illumination and color."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import vision_ops
from .calibration import CalibrationProfile, Thresholds

VISIBILITY_COMPONENTS = ("tenengrad", "laplacian_var", "rms_contrast", "freq_energy")


@dataclass(frozen=True)
class VisibilityMetrics:
    tenengrad: float
    laplacian_var: float
    rms_contrast: float
    freq_energy: float
    score: float


@dataclass(frozen=True)
class IlluminationMetrics:
    median_luminance: float
    overexposed_ratio: float
    underexposed_ratio: float


@dataclass(frozen=True)
class ColorMetrics:
    mean_r: float
    mean_g: float
    mean_b: float
    distortion: float
    blue_green_ratio: float


def visibility_raw(gray: np.ndarray, freq_cutoff: float = 0.25) -> dict[str, float]:
    """Unnormalized sharpness/contrast statistics of a [0, 255] grayscale image."""
    grad = vision_ops.sobel_gradients(gray)
    lap = vision_ops.laplacian(gray)
    return {
        "tenengrad": float(np.mean(grad.gx**2 + grad.gy**2)),
        "laplacian_var": float(np.var(lap)),
        "rms_contrast": float(np.std(np.asarray(gray, dtype=np.float64) / 255.0)),
        "freq_energy": vision_ops.highfreq_energy_ratio(gray, freq_cutoff),
    }


def visibility_score(raw: dict[str, float], profile: CalibrationProfile) -> float:
    normalized = [profile.normalize(name, raw[name]) for name in VISIBILITY_COMPONENTS]
    score = sum(w * v for w, v in zip(profile.visibility_weights, normalized))
    return min(1.0, max(0.0, score))


def compute_visibility(gray: np.ndarray, profile: CalibrationProfile) -> VisibilityMetrics:
    raw = visibility_raw(gray, profile.freq_cutoff)
    return VisibilityMetrics(**raw, score=visibility_score(raw, profile))


def classify_visibility(score: float, t: Thresholds = Thresholds()) -> str:
    if score < t.visibility_low:
        return "low"
    if score > t.visibility_high:
        return "high"
    return "moderate"


def lower_median(values: np.ndarray) -> float:
    flat = np.asarray(values, dtype=np.float64).ravel()
    k = (flat.size - 1) // 2
    return float(np.partition(flat, k)[k])


def compute_illumination(gray: np.ndarray, profile: CalibrationProfile | None = None) -> IlluminationMetrics:
    t = profile.thresholds if profile is not None else Thresholds()
    gray = np.asarray(gray, dtype=np.float64)
    n = gray.size
    return IlluminationMetrics(
        median_luminance=lower_median(gray),
        overexposed_ratio=float(np.count_nonzero(gray > t.luminance_over) / n),
        underexposed_ratio=float(np.count_nonzero(gray < t.luminance_under) / n),
    )


def classify_illumination(m: IlluminationMetrics, t: Thresholds = Thresholds()) -> str:
    if m.median_luminance < t.illumination_dark:
        return "dark"
    if m.median_luminance > t.illumination_bright:
        return "bright"
    # exposure ratios only break ties inside the medium band
    if m.underexposed_ratio > t.extreme_under_ratio:
        return "dark"
    if m.overexposed_ratio > t.extreme_over_ratio:
        return "bright"
    return "medium"


def color_from_means(mean_r: float, mean_g: float, mean_b: float) -> ColorMetrics:
    """Channel distortion and blue/green ratio from channel means on [0, 1]."""
    distortion = math.sqrt((mean_r - mean_g) ** 2 + (mean_r - mean_b) ** 2 + (mean_g - mean_b) ** 2)
    if mean_g > 0:
        bgr = mean_b / mean_g
    else:
        bgr = math.inf if mean_b > 0 else 1.0
    return ColorMetrics(mean_r, mean_g, mean_b, distortion, bgr)


def compute_color(rgb: np.ndarray) -> ColorMetrics:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {rgb.shape}")
    means = rgb.reshape(-1, 3).astype(np.float64).mean(axis=0) / 255.0
    return color_from_means(*(float(m) for m in means))


def classify_color(m: ColorMetrics, t: Thresholds = Thresholds()) -> str:
    if m.distortion > t.color_distortion:
        if m.blue_green_ratio > t.color_blue_bgr:
            return "blue"
        if m.blue_green_ratio < t.color_green_bgr:
            return "green"
    return "natural"
