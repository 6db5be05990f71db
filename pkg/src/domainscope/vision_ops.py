"""Low-level image operators used by the metric modules.

Grayscale images are 2-D float64 arrays (rows = y, columns = x) with values
on the [0, 255] scale; masks are boolean arrays of the same shape.  All
convolutions use edge-replicate padding and are written as correlations, so
the Sobel x kernel responds positively to intensity increasing with x.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import ndimage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

# Bresenham circle of radius 3 as (dx, dy), clockwise from the top.
FAST_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
FAST_ARC = 9


class GradientField(NamedTuple):
    gx: np.ndarray
    gy: np.ndarray


def _check_gray(img: np.ndarray, min_size: int = 1) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    if h < min_size or w < min_size:
        raise ValueError(f"image {w}x{h} is smaller than the required {min_size}x{min_size}")
    return img


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma-weighted grayscale (0.299 R + 0.587 G + 0.114 B) as float64."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {rgb.shape}")
    rgb = rgb.astype(np.float64)
    # integer per-mille weights: exact sums for 8-bit input, so gray stays gray
    gray = (299.0 * rgb[..., 0] + 587.0 * rgb[..., 1] + 114.0 * rgb[..., 2]) / 1000.0
    return np.clip(gray, 0.0, 255.0)


def correlate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate ``img`` with an odd-sized ``kernel`` using edge-replicate padding.

    Terms are accumulated in row-major kernel order, one kernel tap at a time.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    h, w = img.shape
    padded = np.pad(img, ((ry, ry), (rx, rx)), mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            k = kernel[ky, kx]
            if k != 0.0:
                out += k * padded[ky:ky + h, kx:kx + w]
    return out


def sobel_gradients(img: np.ndarray) -> GradientField:
    img = _check_gray(img, 3)
    return GradientField(correlate(img, SOBEL_X), correlate(img, SOBEL_Y))


def laplacian(img: np.ndarray) -> np.ndarray:
    img = _check_gray(img, 3)
    return correlate(img, LAPLACIAN_KERNEL)


def gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return k / k.sum()


def smoothed_gradient_magnitude(img: np.ndarray, sigma: float = 1.4) -> tuple[np.ndarray, GradientField]:
    """Gaussian 5x5 smoothing followed by Sobel; the Canny gradient stage."""
    img = _check_gray(img, 3)
    smooth = correlate(img, gaussian_kernel(5, sigma))
    grad = sobel_gradients(smooth)
    return np.hypot(grad.gx, grad.gy), grad


def _non_max_suppression(mag: np.ndarray, grad: GradientField) -> np.ndarray:
    h, w = mag.shape
    angle = np.rad2deg(np.arctan2(grad.gy, grad.gx)) % 180.0
    padded = np.pad(mag, 1, mode="constant")

    def shifted(dx: int, dy: int) -> np.ndarray:
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    # (dx, dy) of the neighbour lying along the gradient direction
    horizontal = (angle < 22.5) | (angle >= 157.5)
    diag_down = (angle >= 22.5) & (angle < 67.5)
    vertical = (angle >= 67.5) & (angle < 112.5)
    diag_up = (angle >= 112.5) & (angle < 157.5)

    keep = np.zeros_like(mag, dtype=bool)
    for sel, (dx, dy) in ((horizontal, (1, 0)), (diag_down, (1, 1)),
                          (vertical, (0, 1)), (diag_up, (-1, 1))):
        after = shifted(dx, dy)
        before = shifted(-dx, -dy)
        # strict on one side so a plateau of two equal maxima keeps one pixel
        keep |= sel & (mag > before) & (mag >= after)
    return np.where(keep, mag, 0.0)


def canny_edges(img: np.ndarray, low_thresh: float = 50.0, high_thresh: float = 150.0,
                sigma: float = 1.4) -> np.ndarray:
    """Canny edge mask.  Thresholds are on the Sobel magnitude of the smoothed
    [0, 255] image; weak pixels survive when 8-connected to a strong one."""
    if not 0 < low_thresh < high_thresh:
        raise ValueError(f"need 0 < low_thresh < high_thresh, got {low_thresh}, {high_thresh}")
    mag, grad = smoothed_gradient_magnitude(img, sigma)
    thin = _non_max_suppression(mag, grad)
    weak = thin >= low_thresh
    strong = thin >= high_thresh
    if not strong.any():
        return np.zeros_like(weak)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    connected = np.unique(labels[strong])
    return np.isin(labels, connected[connected > 0])


def fast_scores(img: np.ndarray) -> np.ndarray:
    """Per-pixel FAST-9 strength: the largest t for which 9 contiguous circle
    pixels all differ from the centre by at least t in the same direction.

    A pixel is a corner at threshold ``t`` iff its strength exceeds ``t``.
    Pixels within 3 of the border get strength 0.
    """
    img = _check_gray(img, 7)
    h, w = img.shape
    centre = img[3:h - 3, 3:w - 3]
    diffs = np.stack([img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] - centre
                      for dx, dy in FAST_CIRCLE])
    n = len(FAST_CIRCLE)
    best = np.zeros_like(centre)
    for start in range(n):
        idx = [(start + i) % n for i in range(FAST_ARC)]
        arc = diffs[idx]
        best = np.maximum(best, arc.min(axis=0))
        best = np.maximum(best, (-arc).min(axis=0))
    out = np.zeros((h, w), dtype=np.float64)
    out[3:h - 3, 3:w - 3] = best
    return out


def fast_keypoints(img: np.ndarray, intensity_thresh: float = 20.0) -> np.ndarray:
    """FAST-9 corners with 3x3 non-maximum suppression on the corner strength.

    Returns an ``(N, 2)`` integer array of ``(x, y)`` coordinates in row-major
    order.  Equal-strength neighbours are all kept.
    """
    strength = fast_scores(img)
    corner = strength > intensity_thresh
    score = np.where(corner, strength, 0.0)
    local_max = ndimage.maximum_filter(score, size=3, mode="constant", cval=0.0)
    keep = corner & (score >= local_max)
    ys, xs = np.nonzero(keep)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def radial_frequency(h: int, w: int) -> np.ndarray:
    """Radial frequency of each DFT bin as a fraction of the Nyquist frequency."""
    fy = np.fft.fftfreq(h)[:, None] / 0.5
    fx = np.fft.fftfreq(w)[None, :] / 0.5
    return np.sqrt(fx**2 + fy**2)


def highfreq_energy_ratio(img: np.ndarray, cutoff: float = 0.25) -> float:
    """Share of non-DC spectral energy at radial frequency >= ``cutoff`` x Nyquist."""
    if not 0 < cutoff < 1:
        raise ValueError(f"cutoff must be in (0, 1), got {cutoff}")
    img = _check_gray(img, 1)
    spectrum = np.fft.fft2(img - img.mean())
    power = spectrum.real**2 + spectrum.imag**2
    power[0, 0] = 0.0
    total = power.sum()
    if total <= 0.0:
        return 0.0
    high = power[radial_frequency(*img.shape) >= cutoff].sum()
    return float(min(1.0, high / total))
