"""Detection matching, AP/mAP, failure rates and domain-stratified reports."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset_io import Detection, atomic_write_text
from .labels import AXES, CATEGORIES, DomainLabelRecord, axis_of, endpoints
from .scene import BoundingBox

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
CHANGE_METRICS = ("map50", "map50_95", "precision", "recall")
METRIC_TITLES = {
    "map50": "mAP50",
    "map50_95": "mAP50-95",
    "precision": "Precision",
    "recall": "Recall",
    "fp_per_object": "FP/object",
    "fn_per_object": "FN/object",
}
REPORT_VERSION = 1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(dets: Sequence[BoundingBox], gts: Sequence[BoundingBox]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.array([(b.x, b.y, b.x2, b.y2) for b in dets], dtype=np.float64)
    g = np.array([(b.x, b.y, b.x2, b.y2) for b in gts], dtype=np.float64)
    iw = np.minimum(d[:, None, 2], g[None, :, 2]) - np.maximum(d[:, None, 0], g[None, :, 0])
    ih = np.minimum(d[:, None, 3], g[None, :, 3]) - np.maximum(d[:, None, 1], g[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_d = (d[:, 2] - d[:, 0]) * (d[:, 3] - d[:, 1])
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_d[:, None] + area_g[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class ImageMatch:
    """Greedy matching of one image's detections at one IoU threshold.

    ``det_gt[i]`` is the index of the ground truth matched by detection ``i``
    or -1 for a false positive.
    """

    scores: np.ndarray
    det_categories: np.ndarray
    det_gt: np.ndarray
    gt_categories: np.ndarray
    gt_matched: np.ndarray

    @property
    def tp(self) -> int:
        return int(np.count_nonzero(self.det_gt >= 0))

    @property
    def fp(self) -> int:
        return int(np.count_nonzero(self.det_gt < 0))

    @property
    def fn(self) -> int:
        return int(np.count_nonzero(~self.gt_matched))


def match_image(gts: Sequence[BoundingBox], dets: Sequence[Detection],
                iou_thresholds: Sequence[float]) -> dict[float, ImageMatch]:
    """Class-consistent greedy matching at several thresholds sharing one IoU matrix.

    Detections are visited by descending confidence (input order breaks
    ties); each takes the unmatched same-class ground truth of highest IoU
    at or above the threshold (lowest index breaks ties).
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    det_cats = np.array([d.category_id for d in dets], dtype=np.int64)
    gt_cats = np.array([g.category_id for g in gts], dtype=np.int64)
    ious = iou_matrix([d.box for d in dets], gts)
    if len(dets) and len(gts):
        ious = np.where(det_cats[:, None] == gt_cats[None, :], ious, -1.0)
    order = np.argsort(-scores, kind="stable")
    out = {}
    for thr in iou_thresholds:
        det_gt = np.full(len(dets), -1, dtype=np.int64)
        matched = np.zeros(len(gts), dtype=bool)
        if len(gts):
            for d in order:
                cand = np.where(matched, -1.0, ious[d])
                j = int(np.argmax(cand))
                if cand[j] >= thr:
                    det_gt[d] = j
                    matched[j] = True
        out[thr] = ImageMatch(scores, det_cats, det_gt, gt_cats, matched)
    return out


def match_detections(gts: Sequence[BoundingBox], dets: Sequence[Detection], iou_thresh: float = 0.5) -> ImageMatch:
    return match_image(gts, dets, [iou_thresh])[iou_thresh]


@dataclass
class PRCurve:
    category_id: int
    recall: np.ndarray
    precision: np.ndarray
    envelope: np.ndarray
    scores: np.ndarray
    n_gt: int
    n_det: int
    ap: float | None

    @property
    def absent(self) -> bool:
        return self.n_gt == 0


def envelope_ap(recall: np.ndarray, envelope: np.ndarray) -> float:
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def interp101_ap(recall: np.ndarray, envelope: np.ndarray) -> float:
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    padded = np.concatenate([envelope, [0.0]])
    return float(padded[idx].mean())


def compute_pr_curve(matches: Iterable[ImageMatch], category_id: int, mode: str = "interp_101") -> PRCurve:
    """Pooled precision/recall curve of one class over an image set.

    A class without ground truth in the set has ``ap=None`` (absent), never 0.
    """
    if mode not in ("all_points", "interp_101"):
        raise ValueError(f"unknown AP mode {mode!r}")
    scores, hits, n_gt = [], [], 0
    for m in matches:
        sel = m.det_categories == category_id
        scores.append(m.scores[sel])
        hits.append(m.det_gt[sel] >= 0)
        n_gt += int(np.count_nonzero(m.gt_categories == category_id))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    hits = np.concatenate(hits) if hits else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    precision = tp / np.maximum(tp + fp, 1)
    if n_gt == 0:
        empty = np.zeros(0)
        return PRCurve(category_id, empty, empty, empty, empty, 0, len(scores), None)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    ap = envelope_ap(recall, envelope) if mode == "all_points" else interp101_ap(recall, envelope)
    return PRCurve(category_id, recall, precision, envelope, scores, n_gt, len(scores), ap)


@dataclass
class MapResult:
    map50: float | None
    map50_95: float | None
    per_class: dict[int, dict[float, float]]  # class -> iou threshold -> AP
    by_threshold: dict[float, float | None]


def _map_from_matches(per_image: Sequence[Mapping[float, ImageMatch]], class_ids: Sequence[int],
                      iou_list: Sequence[float], mode: str) -> MapResult:
    per_class: dict[int, dict[float, float]] = {}
    for cid in class_ids:
        first = compute_pr_curve((m[iou_list[0]] for m in per_image), cid, mode)
        if first.absent:
            continue
        per_class[cid] = {iou_list[0]: first.ap}
        for thr in iou_list[1:]:
            per_class[cid][thr] = compute_pr_curve((m[thr] for m in per_image), cid, mode).ap
    if not per_class:
        return MapResult(None, None, {}, {thr: None for thr in iou_list})
    by_thr = {thr: float(np.mean([aps[thr] for aps in per_class.values()])) for thr in iou_list}
    map50 = by_thr.get(0.5)
    map50_95 = float(np.mean([by_thr[t] for t in IOU_THRESHOLDS])) if set(IOU_THRESHOLDS) <= set(by_thr) else None
    return MapResult(map50, map50_95, per_class, by_thr)


def compute_map(gts: Mapping[int, Sequence[BoundingBox]], dets: Mapping[int, Sequence[Detection]],
                image_ids: Sequence[int], iou_list: Sequence[float] = IOU_THRESHOLDS,
                mode: str = "interp_101", class_ids: Sequence[int] | None = None) -> MapResult:
    """Class-mean AP over classes with ground truth in ``image_ids``."""
    if not image_ids:
        raise ValueError("image set is empty")
    iou_list = list(iou_list)
    per_image = [match_image(gts.get(i, []), dets.get(i, []), iou_list) for i in image_ids]
    if class_ids is None:
        class_ids = sorted({b.category_id for i in image_ids for b in gts.get(i, [])})
    return _map_from_matches(per_image, class_ids, iou_list, mode)


@dataclass
class FailureCounts:
    tp: int
    fp: int
    fn: int

    @property
    def n_gt(self) -> int:
        return self.tp + self.fn

    @property
    def n_det(self) -> int:
        return self.tp + self.fp

    @property
    def fp_per_object(self) -> float | None:
        return self.fp / self.n_gt if self.n_gt else None

    @property
    def fn_per_object(self) -> float | None:
        return self.fn / self.n_gt if self.n_gt else None

    @property
    def precision(self) -> float | None:
        return self.tp / self.n_det if self.n_det else None

    @property
    def recall(self) -> float | None:
        return self.tp / self.n_gt if self.n_gt else None


def confident(dets: Sequence[Detection], conf: float) -> list[Detection]:
    return [d for d in dets if d.score >= conf]


def failure_rates(gts: Mapping[int, Sequence[BoundingBox]], dets: Mapping[int, Sequence[Detection]],
                  image_ids: Sequence[int], iou_thresh: float = 0.5, conf: float = 0.5) -> FailureCounts:
    """Raw TP/FP/FN at a fixed IoU and confidence operating point."""
    tp = fp = fn = 0
    for i in image_ids:
        m = match_detections(gts.get(i, []), confident(dets.get(i, []), conf), iou_thresh)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return FailureCounts(tp, fp, fn)


def stratify(records: Sequence[DomainLabelRecord], category: str) -> dict[str, list[int]]:
    """Endpoint conditions of a category mapped to their image ids (record order).

    Intermediate and unlabeled images belong to no stratum.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    strata = {cond: [] for cond in endpoints(category)}
    for r in records:
        lab = r.label(category)
        if lab in strata:
            strata[lab].append(r.image_id)
    return strata


# -- change classification -------------------------------------------------------------

@dataclass(frozen=True)
class Change:
    relative: float
    magnitude: str  # slight | moderate | strong
    direction: str  # up | down | none

    @property
    def arrow(self) -> str:
        if self.direction == "none":
            return "="
        n = {"slight": 1, "moderate": 2, "strong": 3}[self.magnitude]
        return ("^" if self.direction == "up" else "v") * n


def classify_change(value: float | None, reference: float | None) -> Change | None:
    """Relative change vs the mixed set: |d| < 3% slight, 3-8% moderate, > 8% strong."""
    if value is None or reference is None or reference == 0:
        return None
    rel = (value - reference) / reference
    a = abs(rel)
    magnitude = "slight" if a < 0.03 else "moderate" if a <= 0.08 else "strong"
    direction = "up" if rel > 0 else "down" if rel < 0 else "none"
    return Change(rel, magnitude, direction)


# -- report ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    key: str
    axis: str
    category: str
    condition: str
    n_images: int
    n_objects: int
    n_detections: int
    map50: float | None
    map50_95: float | None
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    fp_per_object: float | None
    fn_per_object: float | None
    per_class_ap50: dict[str, float | None] = field(default_factory=dict)
    changes: dict[str, Change | None] = field(default_factory=dict)
    note: str = ""

    def to_json(self) -> dict:
        data = asdict(self)
        data["changes"] = {k: (asdict(v) if v else None) for k, v in self.changes.items()}
        return data

    @classmethod
    def from_json(cls, data: dict) -> ReportRow:
        data = dict(data)
        data["changes"] = {k: (Change(**v) if v else None) for k, v in data.get("changes", {}).items()}
        return cls(**data)


CSV_COLUMNS = (
    "key", "axis", "category", "condition", "n_images", "n_objects", "n_detections",
    "map50", "map50_95", "precision", "recall", "tp", "fp", "fn", "fp_per_object", "fn_per_object",
    *(f"{m}_{suffix}" for m in CHANGE_METRICS for suffix in ("change_pct", "arrow")),
    "note",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class StratifiedReport:
    rows: list[ReportRow]
    class_names: dict[int, str]
    ap_mode: str = "interp_101"
    conf_threshold: float = 0.5
    iou_threshold: float = 0.5

    @property
    def mixed(self) -> ReportRow:
        return self.rows[0]

    def row(self, key: str) -> ReportRow:
        for r in self.rows:
            if r.key == key:
                return r
        raise KeyError(key)

    def to_json(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "ap_mode": self.ap_mode,
            "conf_threshold": self.conf_threshold,
            "iou_threshold": self.iou_threshold,
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "rows": [r.to_json() for r in self.rows],
        }

    @classmethod
    def from_json(cls, data: dict) -> StratifiedReport:
        if data.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {data.get('version')!r}")
        return cls(
            rows=[ReportRow.from_json(r) for r in data["rows"]],
            class_names={int(k): v for k, v in data["class_names"].items()},
            ap_mode=data["ap_mode"],
            conf_threshold=data["conf_threshold"],
            iou_threshold=data["iou_threshold"],
        )

    def to_csv(self) -> str:
        class_cols = [f"ap50_{name}" for _, name in sorted(self.class_names.items())]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*CSV_COLUMNS, *class_cols])
        for r in self.rows:
            values = {k: getattr(r, k) for k in CSV_COLUMNS if hasattr(r, k)}
            for m in CHANGE_METRICS:
                ch = r.changes.get(m)
                values[f"{m}_change_pct"] = None if ch is None else round(100.0 * ch.relative, 4)
                values[f"{m}_arrow"] = "" if ch is None else ch.arrow
            row = [_fmt(values[c]) for c in CSV_COLUMNS]
            row += [_fmt(r.per_class_ap50.get(name)) for _, name in sorted(self.class_names.items())]
            w.writerow(row)
        return buf.getvalue()

    def _cell(self, row: ReportRow, metric: str) -> str:
        value = getattr(row, metric)
        if value is None:
            return "n/a"
        text = f"{value:.3f}"
        ch = row.changes.get(metric)
        if ch is not None and row.key != "mixed":
            text += f" {ch.arrow}"
        return text

    def to_text(self) -> str:
        metrics = (*CHANGE_METRICS, "fp_per_object", "fn_per_object")
        header = f"{'condition':<24}{'images':>7}{'objects':>8}" + "".join(f"{METRIC_TITLES[m]:>13}" for m in metrics)
        lines = [header, "-" * len(header)]
        for r in self.rows:
            label = r.key if r.key == "mixed" else f"{r.category}/{r.condition}"
            cells = "".join(f"{self._cell(r, m):>13}" for m in metrics)
            lines.append(f"{label:<24}{r.n_images:>7}{r.n_objects:>8}{cells}")
            if r.note:
                lines.append(f"{'':<24}note: {r.note}")
        lines.append("")
        lines.append(f"arrows: change vs mixed, ^/v slight (<3%), ^^/vv moderate (3-8%), ^^^/vvv strong (>8%); "
                     f"P/R and FP/FN at conf >= {self.conf_threshold}, IoU {self.iou_threshold}; AP mode {self.ap_mode}")
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        cols = self.rows
        head = ["Metric"] + ["Mixed" if r.key == "mixed" else
                             f"{r.category.capitalize()}: {r.condition.replace('_', ' ').capitalize()}"
                             for r in cols]
        axis_row = [""] + ["" if r.key == "mixed" else r.axis.capitalize() for r in cols]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head),
                 "| " + " | ".join(axis_row) + " |"]
        for m in (*CHANGE_METRICS, "fp_per_object", "fn_per_object"):
            lines.append("| " + " | ".join([METRIC_TITLES[m]] + [self._cell(r, m) for r in cols]) + " |")
        return "\n".join(lines) + "\n"


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "class"


class Evaluation:
    """Matches computed once per image and reused for every stratum."""

    def __init__(self, records: Sequence[DomainLabelRecord], gts: Mapping[int, Sequence[BoundingBox]],
                 dets: Mapping[int, Sequence[Detection]], class_names: Mapping[int, str],
                 ap_mode: str = "interp_101", conf: float = 0.5, iou_thresh: float = 0.5):
        self.records = list(records)
        self.gts = gts
        self.dets = dets
        self.class_names = dict(sorted(class_names.items()))
        self.ap_mode = ap_mode
        self.conf = conf
        self.iou_thresh = iou_thresh
        self.image_ids = [r.image_id for r in self.records]
        thresholds = sorted(set(IOU_THRESHOLDS) | {iou_thresh})
        self._matches = {i: match_image(gts.get(i, []), dets.get(i, []), thresholds) for i in self.image_ids}
        self._operating = {i: match_detections(gts.get(i, []), confident(dets.get(i, []), conf), iou_thresh)
                           for i in self.image_ids}

    def conditions(self) -> list[tuple[str, str, str, list[int]]]:
        out = [("mixed", "", "mixed", list(self.image_ids))]
        for cat in CATEGORIES:
            for cond, ids in stratify(self.records, cat).items():
                out.append((f"{cat}:{cond}", cat, cond, ids))
        return out

    def _row(self, key: str, category: str, condition: str, ids: list[int]) -> ReportRow:
        n_obj = sum(len(self.gts.get(i, [])) for i in ids)
        n_det = sum(len(self.dets.get(i, [])) for i in ids)
        counts = FailureCounts(0, 0, 0)
        for i in ids:
            m = self._operating[i]
            counts = FailureCounts(counts.tp + m.tp, counts.fp + m.fp, counts.fn + m.fn)
        note = ""
        if ids:
            res = _map_from_matches([self._matches[i] for i in ids], list(self.class_names),
                                    list(IOU_THRESHOLDS), self.ap_mode)
        else:
            res = MapResult(None, None, {}, {})
        if not ids:
            note = "no images"
        elif n_obj == 0:
            note = "unscorable: no ground-truth objects"
        per_class = {name: (res.per_class[cid][0.5] if cid in res.per_class else None)
                     for cid, name in self.class_names.items()}
        return ReportRow(
            key=key, axis=axis_of(category) if category else "", category=category, condition=condition,
            n_images=len(ids), n_objects=n_obj, n_detections=n_det,
            map50=res.map50, map50_95=res.map50_95,
            tp=counts.tp, fp=counts.fp, fn=counts.fn,
            precision=counts.precision, recall=counts.recall,
            fp_per_object=counts.fp_per_object, fn_per_object=counts.fn_per_object,
            per_class_ap50=per_class, note=note,
        )

    def report(self) -> StratifiedReport:
        rows = [self._row(*c) for c in self.conditions()]
        mixed = rows[0]
        for r in rows:
            r.changes = {m: classify_change(getattr(r, m), getattr(mixed, m)) for m in CHANGE_METRICS}
        return StratifiedReport(rows, self.class_names, self.ap_mode, self.conf, self.iou_thresh)

    def pr_curve(self, ids: Sequence[int], class_id: int, mode: str | None = None) -> PRCurve:
        return compute_pr_curve((self._matches[i][self.iou_thresh] for i in ids), class_id, mode or self.ap_mode)

    def export_pr_curves(self, out_dir: str | Path) -> dict:
        """One CSV per (condition, class) at the report IoU, plus a manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for key, category, condition, ids in self.conditions():
            for cid, name in self.class_names.items():
                curve = self.pr_curve(ids, cid, "all_points")
                entry = {"condition": key, "class_id": cid, "class": name, "gt_instances": curve.n_gt,
                         "detections": curve.n_det, "file": None}
                if curve.absent:
                    entry["absent"] = "no ground-truth instances"
                    entries.append(entry)
                    continue
                stem = "mixed" if key == "mixed" else f"{category}_{condition}"
                fname = f"pr_{stem}_{_safe(name)}.csv"
                buf = io.StringIO()
                buf.write(f"# condition={key} class={name} class_id={cid} gt_instances={curve.n_gt} "
                          f"detections={curve.n_det} iou={self.iou_thresh} "
                          f"ap_all_points={curve.ap!r} "
                          f"ap_interp_101={interp101_ap(curve.recall, curve.envelope)!r}\n")
                w = csv.writer(buf, lineterminator="\n")
                w.writerow(["rank", "confidence", "recall", "precision", "envelope_precision"])
                for k in range(len(curve.recall)):
                    w.writerow([k + 1, repr(float(curve.scores[k])), repr(float(curve.recall[k])),
                                repr(float(curve.precision[k])), repr(float(curve.envelope[k]))])
                atomic_write_text(out_dir / fname, buf.getvalue())
                entry["file"] = fname
                entry["ap_all_points"] = curve.ap
                entries.append(entry)
        manifest = {"iou": self.iou_thresh, "curves": entries}
        atomic_write_text(out_dir / "pr_manifest.json", json.dumps(manifest, indent=2) + "\n")
        return manifest


def build_report(records: Sequence[DomainLabelRecord], gts: Mapping[int, Sequence[BoundingBox]],
                 dets: Mapping[int, Sequence[Detection]], class_names: Mapping[int, str],
                 ap_mode: str = "interp_101") -> StratifiedReport:
    return Evaluation(records, gts, dets, class_names, ap_mode).report()


def read_pr_csv(path: str | Path) -> tuple[dict[str, str], list[dict[str, float]]]:
    lines = Path(path).read_text().splitlines()
    meta = dict(part.split("=", 1) for part in lines[0].lstrip("# ").split())
    rows = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(lines[1:])]
    return meta, rows
