"""Calibration profile, corpus statistics and normalization fitting.

A :class:`CalibrationProfile` holds everything that turns raw metric values
into category labels: the clipped min-max normalization of each skewed raw
metric, every category threshold, the score weights, and the operator
parameters that the raw metrics depend on.  Profiles are immutable and
identified by a content hash so label files can be traced to the profile
that produced them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .labels import CATEGORIES, CATEGORY_LABELS, UNLABELED

PROFILE_SCHEMA_VERSION = 1
STAT_PERCENTILES = (1, 2, 25, 50, 75, 98, 99)
HISTOGRAM_BINS = 256
RESERVOIR_CAP = 1_000_000

# Raw metrics that are min-max normalized before entering a score, and
# whether they are log1p-scaled first.
NORMALIZED_METRICS = {
    "tenengrad": True,
    "laplacian_var": True,
    "rms_contrast": False,
    "freq_energy": True,
    "keypoint_density": True,
    "edge_density": False,
    "laplacian_mean": True,
}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NormEntry:
    log_transform: bool
    clip_lo: float
    clip_hi: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.degenerate and not self.clip_lo < self.clip_hi:
            raise CalibrationError(
                f"clip_lo must be below clip_hi, got [{self.clip_lo}, {self.clip_hi}]")


def apply_normalization(raw: float, entry: NormEntry) -> float:
    """Optional log1p, clamp into the clip window, then map linearly onto [0, 1]."""
    if entry.degenerate:
        return 0.0
    x = math.log1p(raw) if entry.log_transform else float(raw)
    if x <= entry.clip_lo:
        return 0.0
    if x >= entry.clip_hi:
        return 1.0
    return (x - entry.clip_lo) / (entry.clip_hi - entry.clip_lo)


@dataclass(frozen=True)
class Thresholds:
    visibility_low: float = 0.35
    visibility_high: float = 0.65
    illumination_dark: float = 100.0
    illumination_bright: float = 130.0
    luminance_under: float = 30.0
    luminance_over: float = 225.0
    extreme_under_ratio: float = 0.5
    extreme_over_ratio: float = 0.5
    color_distortion: float = 0.6
    color_green_bgr: float = 0.7
    color_blue_bgr: float = 0.8
    layout_sparse_count: int = 4
    layout_crowded_count: int = 12
    layout_sparse_coverage: float = 0.05
    layout_crowded_coverage: float = 0.4
    layout_sparse_overlap: float = 0.05
    layout_crowded_overlap: float = 0.15
    scale_small_area: float = 0.005
    scale_large_area: float = 0.025
    scale_ratio: float = 0.5
    background_simple: float = 0.15
    background_complex: float = 0.4
    orientation_upright: float = 1.0
    orientation_rotated: float = 2.5
    perspective_nadir_tb: float = 2.0
    perspective_nadir_range: float = 3.0
    perspective_front_tb: float = 4.0
    perspective_front_range: float = 5.0
    perspective_front_brightness: float = 50.0

    def __post_init__(self):
        pairs = [
            ("visibility_low", "visibility_high"),
            ("illumination_dark", "illumination_bright"),
            ("luminance_under", "luminance_over"),
            ("color_green_bgr", "color_blue_bgr"),
            ("layout_sparse_count", "layout_crowded_count"),
            ("layout_sparse_coverage", "layout_crowded_coverage"),
            ("layout_sparse_overlap", "layout_crowded_overlap"),
            ("scale_small_area", "scale_large_area"),
            ("background_simple", "background_complex"),
            ("orientation_upright", "orientation_rotated"),
            ("perspective_nadir_tb", "perspective_front_tb"),
            ("perspective_nadir_range", "perspective_front_range"),
        ]
        for lo, hi in pairs:
            if not getattr(self, lo) < getattr(self, hi):
                raise CalibrationError(f"threshold {lo} must be below {hi}")


@dataclass(frozen=True)
class CalibrationProfile:
    normalization: Mapping[str, NormEntry] = field(default_factory=dict)
    thresholds: Thresholds = field(default_factory=Thresholds)
    visibility_weights: tuple[float, ...] = (0.35, 0.30, 0.20, 0.15)
    background_weights: tuple[float, ...] = (0.45, 0.35, 0.20)
    canny_low: float = 50.0
    canny_high: float = 150.0
    canny_sigma: float = 1.4
    fast_threshold: float = 20.0
    freq_cutoff: float = 0.25
    depth_scale: float = 1.0
    depth_png_scale: float = 1000.0
    split_fraction: float = 0.5
    min_region_pixels: int = 100
    depth_trim: tuple[float, float] | None = (2.0, 98.0)
    min_background_fraction: float = 0.01
    max_failure_fraction: float = 0.05
    name: str = "default"
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "visibility_weights", tuple(float(w) for w in self.visibility_weights))
        object.__setattr__(self, "background_weights", tuple(float(w) for w in self.background_weights))
        if self.depth_trim is not None:
            object.__setattr__(self, "depth_trim", tuple(float(p) for p in self.depth_trim))
        for name, weights, n in (("visibility", self.visibility_weights, 4),
                                 ("background", self.background_weights, 3)):
            if len(weights) != n:
                raise CalibrationError(f"{name} weights need {n} entries")
            if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
                raise CalibrationError(f"{name} weights must be nonnegative and sum to 1")
        if not 0 < self.canny_low < self.canny_high:
            raise CalibrationError("need 0 < canny_low < canny_high")
        if not 0 < self.freq_cutoff < 1:
            raise CalibrationError("freq_cutoff must lie in (0, 1)")
        if not 0 < self.split_fraction <= 0.5:
            raise CalibrationError("split_fraction must lie in (0, 0.5]")
        if self.depth_scale <= 0 or self.depth_png_scale <= 0:
            raise CalibrationError("depth scales must be positive")

    def entry(self, metric: str) -> NormEntry:
        try:
            return self.normalization[metric]
        except KeyError:
            raise CalibrationError(f"profile has no normalization entry for {metric!r}") from None

    def normalize(self, metric: str, raw: float) -> float:
        return apply_normalization(raw, self.entry(metric))

    def content(self) -> dict[str, Any]:
        data = {
            "schema_version": PROFILE_SCHEMA_VERSION,
            "normalization": {k: asdict(v) for k, v in sorted(self.normalization.items())},
            "thresholds": asdict(self.thresholds),
        }
        for f in fields(self):
            if f.name not in ("normalization", "thresholds"):
                value = getattr(self, f.name)
                data[f.name] = list(value) if isinstance(value, tuple) else value
        return data

    @property
    def profile_id(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_json(self) -> dict[str, Any]:
        data = self.content()
        data["profile_id"] = self.profile_id
        return data

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> CalibrationProfile:
        data = dict(data)
        version = data.pop("schema_version", None)
        if version != PROFILE_SCHEMA_VERSION:
            raise CalibrationError(f"unsupported profile schema version {version!r}")
        stated_id = data.pop("profile_id", None)
        try:
            norm = {k: NormEntry(**v) for k, v in data.pop("normalization", {}).items()}
            thresholds = Thresholds(**data.pop("thresholds", {}))
            if data.get("depth_trim") is not None:
                data["depth_trim"] = tuple(data["depth_trim"])
            profile = cls(normalization=norm, thresholds=thresholds, **data)
        except TypeError as exc:
            raise CalibrationError(f"malformed profile: {exc}") from None
        if stated_id is not None and stated_id != profile.profile_id:
            raise CalibrationError(
                f"profile_id {stated_id} does not match its content ({profile.profile_id})")
        return profile

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> CalibrationProfile:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise CalibrationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_json(data)

    @classmethod
    def default(cls) -> CalibrationProfile:
        """The packaged, non-canonical profile fitted on a synthetic corpus."""
        text = resources.files("domainscope").joinpath("data/default_profile.json").read_text()
        return cls.from_json(json.loads(text))

    def with_thresholds(self, **changes) -> CalibrationProfile:
        return replace(self, thresholds=replace(self.thresholds, **changes))


# -- corpus statistics --------------------------------------------------------

@dataclass
class CorpusStats:
    name: str
    count: int
    min: float
    max: float
    mean: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    percentiles: dict[int, float]

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the smallest value with at least q% of data at or below."""
    n = len(sorted_values)
    rank = max(1, math.ceil(q / 100.0 * n))
    return float(sorted_values[rank - 1])


class MetricAccumulator:
    """Streaming accumulator for one raw metric.

    Keeps every sample up to ``cap`` (exact percentiles) and a uniform
    reservoir beyond that.  Accumulators built on disjoint partitions can be
    merged in any order.
    """

    def __init__(self, name: str, cap: int = RESERVOIR_CAP, seed: int = 0):
        self.name = name
        self.cap = cap
        self.count = 0
        self.total = 0.0
        self.min = math.inf
        self.max = -math.inf
        self._samples: list[float] = []
        self._rng = np.random.default_rng(seed)

    def add(self, value: float | None) -> None:
        if value is None or not math.isfinite(value):
            return
        value = float(value)
        self.count += 1
        self.total += value
        self.min = min(self.min, value)
        self.max = max(self.max, value)
        if len(self._samples) < self.cap:
            self._samples.append(value)
        else:
            j = int(self._rng.integers(0, self.count))
            if j < self.cap:
                self._samples[j] = value

    def extend(self, values: Iterable[float | None]) -> MetricAccumulator:
        for v in values:
            self.add(v)
        return self

    def merge(self, other: MetricAccumulator) -> MetricAccumulator:
        out = MetricAccumulator(self.name, self.cap)
        out.count = self.count + other.count
        out.total = self.total + other.total
        out.min = min(self.min, other.min)
        out.max = max(self.max, other.max)
        a, b = self._samples, other._samples
        if len(a) + len(b) <= self.cap:
            out._samples = a + b
        else:
            rng = out._rng
            take_a = int(rng.hypergeometric(self.count, other.count, self.cap))
            take_a = min(take_a, len(a))
            take_b = min(self.cap - take_a, len(b))
            out._samples = (list(rng.choice(a, take_a, replace=False))
                            + list(rng.choice(b, take_b, replace=False)))
        return out

    def finalize(self) -> CorpusStats:
        if self.count < 2:
            raise CalibrationError(f"metric {self.name!r} needs at least 2 samples, got {self.count}")
        values = np.sort(np.asarray(self._samples, dtype=np.float64))
        lo, hi = self.min, self.max
        if hi <= lo:
            hi = lo + 1.0
        hist, edges = np.histogram(values, bins=HISTOGRAM_BINS, range=(lo, hi))
        if len(values) < self.count:
            hist = _rescale_counts(hist, self.count)
        return CorpusStats(
            name=self.name,
            count=self.count,
            min=self.min,
            max=self.max,
            mean=self.total / self.count,
            histogram=hist,
            bin_edges=edges,
            percentiles={q: nearest_rank(values, q) for q in STAT_PERCENTILES},
        )


def _rescale_counts(hist: np.ndarray, total: int) -> np.ndarray:
    # largest-remainder rounding keeps the sum exactly at ``total``
    exact = hist * (total / hist.sum())
    out = np.floor(exact).astype(np.int64)
    short = total - int(out.sum())
    order = np.argsort(-(exact - out), kind="stable")
    out[order[:short]] += 1
    return out


def collect_stats(metric_stream: Iterable[Mapping[str, float | None]],
                  metrics: Sequence[str] | None = None) -> dict[str, CorpusStats]:
    accs: dict[str, MetricAccumulator] = {}
    for vector in metric_stream:
        for name, value in vector.items():
            if metrics is not None and name not in metrics:
                continue
            accs.setdefault(name, MetricAccumulator(name)).add(value)
    for name in metrics or ():
        accs.setdefault(name, MetricAccumulator(name))
    return {name: acc.finalize() for name, acc in accs.items()}


def fit_normalization(stats: CorpusStats, log_transform: bool) -> NormEntry:
    """Clip window at the corpus p1/p99, on the log1p scale when requested.

    log1p is monotone, so percentiles of the transformed corpus are the
    transformed percentiles.
    """
    lo, hi = stats.percentiles[1], stats.percentiles[99]
    if log_transform:
        lo, hi = math.log1p(lo), math.log1p(hi)
    if not lo < hi:
        return NormEntry(log_transform, lo, lo, degenerate=True)
    return NormEntry(log_transform, lo, hi)


def fit_profile(stats: Mapping[str, CorpusStats], base: CalibrationProfile | None = None,
                **overrides) -> CalibrationProfile:
    base = base or CalibrationProfile()
    norm = dict(base.normalization)
    for metric, use_log in NORMALIZED_METRICS.items():
        if metric not in stats:
            raise CalibrationError(f"no corpus statistics for {metric!r}")
        norm[metric] = fit_normalization(stats[metric], use_log)
    return replace(base, normalization=norm, **overrides)


# -- agreement with manual labels -----------------------------------------------

@dataclass
class CategoryAgreement:
    category: str
    labels: tuple[str, ...]
    confusion: np.ndarray  # rows: manual label, columns: automatic label
    total: int
    accuracy: float | None

    def to_json(self) -> dict[str, Any]:
        return {
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "total": self.total,
            "accuracy": self.accuracy,
        }


def agreement_report(auto, manual: Sequence[tuple[int, Mapping[str, str]]]) -> dict[str, CategoryAgreement]:
    """Per-category confusion matrices of manual vs automatic labels.

    Pairs where either side is unlabeled (or the manual entry omits the
    category) are left out of that category's matrix.
    """
    if not manual:
        raise CalibrationError("manual label set is empty")
    by_id = {r.image_id: r for r in auto}
    unknown = [image_id for image_id, _ in manual if image_id not in by_id]
    if unknown:
        raise CalibrationError(f"manual labels reference unknown image ids: {unknown[:10]}")
    out = {}
    for cat in CATEGORIES:
        vocab = CATEGORY_LABELS[cat]
        index = {lab: i for i, lab in enumerate(vocab)}
        confusion = np.zeros((len(vocab), len(vocab)), dtype=np.int64)
        for image_id, labs in manual:
            truth = labs.get(cat, UNLABELED)
            pred = by_id[image_id].label(cat)
            if truth == UNLABELED or pred == UNLABELED:
                continue
            if truth not in index:
                raise CalibrationError(f"image {image_id}: unknown manual {cat} label {truth!r}")
            confusion[index[truth], index[pred]] += 1
        total = int(confusion.sum())
        accuracy = float(np.trace(confusion) / total) if total else None
        out[cat] = CategoryAgreement(cat, vocab, confusion, total, accuracy)
    return out


def threshold_sweep(records, profile: CalibrationProfile, threshold: str,
                    values: Iterable[float]) -> list[tuple[float, dict[str, dict[str, int]]]]:
    """Category populations as one threshold is moved; no choice is made."""
    from .pipeline import classify_metrics

    out = []
    for value in values:
        moved = profile.with_thresholds(**{threshold: value})
        counts: dict[str, dict[str, int]] = {c: {} for c in CATEGORIES}
        for rec in records:
            labels, _, _ = classify_metrics(rec.metrics, moved, rec.reasons)
            for cat, lab in labels.items():
                counts[cat][lab] = counts[cat].get(lab, 0) + 1
        out.append((value, counts))
    return out
