"""Command-line entry point: ``domainscope {label,calibrate,evaluate,report}``.

Exit codes: 0 success, 2 usage or validation error, 3 data-quality abort,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .calibration import NORMALIZED_METRICS, CalibrationError, CalibrationProfile, agreement_report, collect_stats, fit_profile
from .dataset_io import (DatasetError, atomic_write_text, load_dataset, load_detections, read_labels,
                         write_labels, write_labels_csv)
from .evaluation import Evaluation, StratifiedReport
from .labels import CATEGORIES
from .pipeline import DataQualityError, LabelingJob, measure_dataset, record_from_metrics, run_job

log = logging.getLogger("domainscope")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 2, 3, 4
MIN_CALIBRATION_IMAGES = 10
WORKERS_ENV = "DOMAINSCOPE_WORKERS"


class UsageError(Exception):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_hash(index) -> str:
    """Hash of the annotation-referenced image files, in dataset order."""
    h = hashlib.sha256()
    for im in index.images:
        h.update(im.file_name.encode())
        if im.path.is_file():
            h.update(sha256_file(im.path).encode())
    return h.hexdigest()


class RunManifest:
    def __init__(self, subcommand: str, args: argparse.Namespace):
        self.data = {
            "tool_version": __version__,
            "subcommand": subcommand,
            "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                      if k not in ("func",)},
            "profile_id": None,
            "inputs": {},
            "outputs": {},
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "exit_status": None,
        }

    def add_input(self, name: str, path: str | Path) -> None:
        self.data["inputs"][name] = sha256_file(path)

    def add_output(self, path: str | Path) -> None:
        self.data["outputs"][str(path)] = sha256_file(path)

    def write(self, path: str | Path, status: int) -> None:
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        self.data["exit_status"] = status
        atomic_write_text(path, json.dumps(self.data, indent=2) + "\n")


def resolve_workers(value: int | None) -> int:
    if value is None:
        env = os.environ.get(WORKERS_ENV)
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV}={env!r} is not an integer") from None
    if value < 1:
        raise UsageError("--workers must be at least 1")
    return value


def load_profile(spec: str) -> CalibrationProfile:
    if spec == "default":
        return CalibrationProfile.default()
    return CalibrationProfile.load(spec)


def _existing_file(path: Path, flag: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return path


def cmd_label(args: argparse.Namespace) -> int:
    _existing_file(args.annotations, "--annotations")
    if not args.images.is_dir():
        raise UsageError(f"--images: no such directory {args.images}")
    if args.depth is not None and not args.depth.is_dir():
        raise UsageError(f"--depth: no such directory {args.depth}")
    args.workers = resolve_workers(args.workers)
    manifest = RunManifest("label", args)
    profile = load_profile(args.profile)
    manifest.data["profile_id"] = profile.profile_id
    index = load_dataset(args.annotations, args.images)
    manifest.add_input("annotations", args.annotations)
    manifest.data["inputs"]["images"] = dataset_hash(index)
    job = LabelingJob(index, profile, args.depth, args.workers)
    try:
        records, summary = run_job(job)
    except DataQualityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for image_id, reason in exc.failures[:20]:
            print(f"  image {image_id}: {reason}", file=sys.stderr)
        manifest.write(f"{args.out}.manifest.json", EXIT_DATA)
        return EXIT_DATA
    write_labels(records, args.out)
    manifest.add_output(args.out)
    if args.summary is not None:
        atomic_write_text(args.summary, summary.to_csv())
        text_path = args.summary.with_suffix(".txt")
        atomic_write_text(text_path, summary.to_text())
        manifest.add_output(args.summary)
    if args.csv is not None:
        write_labels_csv(records, args.csv)
    manifest.data["failures"] = [{"image_id": i, "reason": r} for i, r in summary.failures]
    manifest.write(f"{args.out}.manifest.json", EXIT_OK)
    print(summary.to_text(), end="")
    return EXIT_OK


def read_manual_labels(path: Path) -> list[tuple[int, dict[str, str]]]:
    """Manual labels as JSON Lines (or a JSON list) of ``{"image_id", "labels": {...}}``."""
    text = path.read_text()
    try:
        items = json.loads(text) if text.lstrip().startswith("[") else [
            json.loads(line) for line in text.splitlines() if line.strip()]
        out = []
        for item in items:
            labels = {k: v for k, v in item["labels"].items() if k in CATEGORIES}
            out.append((int(item["image_id"]), labels))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed manual labels ({exc})") from None
    return out


def cmd_calibrate(args: argparse.Namespace) -> int:
    _existing_file(args.annotations, "--annotations")
    if not args.images.is_dir():
        raise UsageError(f"--images: no such directory {args.images}")
    manifest = RunManifest("calibrate", args)
    base = load_profile(args.base_profile) if args.base_profile else CalibrationProfile()
    index = load_dataset(args.annotations, args.images)
    manifest.add_input("annotations", args.annotations)
    manifest.data["inputs"]["images"] = dataset_hash(index)
    if len(index.images) < MIN_CALIBRATION_IMAGES:
        raise UsageError(f"calibration needs at least {MIN_CALIBRATION_IMAGES} images, got {len(index.images)}")
    measured, failures = measure_dataset(index, base, args.depth, resolve_workers(args.workers))
    if len(measured) < MIN_CALIBRATION_IMAGES:
        raise UsageError(f"only {len(measured)} images could be measured")
    stats = collect_stats((m for _, m, _ in measured), metrics=list(NORMALIZED_METRICS))
    profile = fit_profile(stats, base, name=args.name,
                          note=f"normalization fitted on {len(measured)} images of {args.annotations.name}")
    profile.save(args.out_profile)
    manifest.data["profile_id"] = profile.profile_id
    manifest.add_output(args.out_profile)
    stats_doc = {name: {"count": s.count, "min": s.min, "max": s.max, "mean": s.mean,
                        "percentiles": {str(q): v for q, v in s.percentiles.items()},
                        "histogram": s.histogram.tolist(),
                        "bin_edges": [float(e) for e in s.bin_edges]}
                 for name, s in sorted(stats.items())}
    stats_path = args.out_profile.with_name(args.out_profile.stem + ".stats.json")
    atomic_write_text(stats_path, json.dumps(stats_doc, indent=2) + "\n")
    print(f"profile {profile.profile_id} written to {args.out_profile}")
    if args.manual_labels is not None:
        _existing_file(args.manual_labels, "--manual-labels")
        manual = read_manual_labels(args.manual_labels)
        records = [record_from_metrics(i, m, r, profile) for i, m, r in measured]
        agreement = agreement_report(records, manual)
        doc = {"profile_id": profile.profile_id, "n_manual": len(manual),
               "categories": {c: a.to_json() for c, a in agreement.items()}}
        agree_path = args.out_profile.with_name(args.out_profile.stem + ".agreement.json")
        atomic_write_text(agree_path, json.dumps(doc, indent=2) + "\n")
        manifest.add_input("manual_labels", args.manual_labels)
        manifest.add_output(agree_path)
        for c, a in agreement.items():
            acc = "n/a" if a.accuracy is None else f"{a.accuracy:.3f}"
            print(f"  {c:<14}agreement {acc} over {a.total} images")
    manifest.data["failures"] = [{"image_id": i, "reason": r} for i, r in failures]
    manifest.write(args.out_profile.with_name(args.out_profile.name + ".manifest.json"), EXIT_OK)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    for path, flag in ((args.annotations, "--annotations"), (args.detections, "--detections"),
                       (args.labels, "--labels")):
        _existing_file(path, flag)
    manifest = RunManifest("evaluate", args)
    index = load_dataset(args.annotations, args.annotations.parent)
    dets = load_detections(args.detections, index)
    records = read_labels(args.labels)
    if not records:
        raise UsageError(f"{args.labels}: no label records")
    profile_ids = sorted({r.profile_id for r in records})
    if len(profile_ids) > 1 and not args.force:
        raise UsageError(f"{args.labels} mixes profiles {profile_ids}; use --force to evaluate anyway")
    if args.profile is not None:
        expected = load_profile(args.profile).profile_id
        if profile_ids != [expected] and not args.force:
            raise UsageError(f"labels were produced under profile(s) {profile_ids}, not {expected}")
    unknown = [r.image_id for r in records if r.image_id not in index]
    if unknown:
        raise DatasetError(f"{args.labels}: image ids not in annotations: {unknown[:10]}")
    manifest.data["profile_id"] = profile_ids[0] if len(profile_ids) == 1 else profile_ids
    for name, path in (("annotations", args.annotations), ("detections", args.detections), ("labels", args.labels)):
        manifest.add_input(name, path)

    evaluation = Evaluation(records, index.annotations, dets, index.categories, ap_mode=args.ap_mode)
    report = evaluation.report()
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.json", json.dumps(report.to_json(), indent=2) + "\n")
    atomic_write_text(out / "report.csv", report.to_csv())
    atomic_write_text(out / "report.txt", report.to_text())
    for name in ("report.json", "report.csv", "report.txt"):
        manifest.add_output(out / name)
    if args.pr_curves:
        pr = evaluation.export_pr_curves(out / "pr_curves")
        for entry in pr["curves"]:
            if entry["file"]:
                manifest.add_output(out / "pr_curves" / entry["file"])
    manifest.write(out / "manifest.json", EXIT_OK)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    path = args.run_dir / "report.json"
    if not path.is_file():
        raise UsageError(f"{args.run_dir}: no report.json (run `domainscope evaluate` first)")
    try:
        report = StratifiedReport.from_json(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: unreadable report ({exc})") from None
    text = {"text": report.to_text, "csv": report.to_csv, "markdown": report.to_markdown}[args.format]()
    manifest = RunManifest("report", args)
    manifest.add_input("report", path)
    if args.out is not None:
        atomic_write_text(args.out, text)
        manifest.add_output(args.out)
    else:
        sys.stdout.write(text)
    manifest.write(args.run_dir / f"report_{args.format}.manifest.json", EXIT_OK)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="domainscope", description="Underwater domain labeling and stratified detection evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("label", help="assign domain labels to every image of a COCO dataset")
    s.add_argument("--annotations", type=Path, required=True)
    s.add_argument("--images", type=Path, required=True)
    s.add_argument("--depth", type=Path, help="directory of <image_id>.png / <image_id>.dmap depth maps")
    s.add_argument("--profile", required=True, help="calibration profile JSON, or 'default'")
    s.add_argument("--out", type=Path, required=True, help="output JSON Lines file")
    s.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    s.add_argument("--summary", type=Path, help="category population CSV (a .txt twin is written too)")
    s.add_argument("--csv", type=Path, help="optional flat CSV export of the labels")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("calibrate", help="fit a calibration profile on a corpus")
    s.add_argument("--annotations", type=Path, required=True)
    s.add_argument("--images", type=Path, required=True)
    s.add_argument("--depth", type=Path)
    s.add_argument("--out-profile", type=Path, required=True)
    s.add_argument("--manual-labels", type=Path)
    s.add_argument("--base-profile", help="profile supplying thresholds and operator parameters")
    s.add_argument("--name", default="calibrated")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("evaluate", help="domain-stratified detection evaluation")
    s.add_argument("--annotations", type=Path, required=True)
    s.add_argument("--detections", type=Path, required=True)
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--pr-curves", action="store_true", help="export per-class PR curve CSVs")
    s.add_argument("--profile", help="refuse labels produced under any other profile")
    s.add_argument("--force", action="store_true", help="evaluate despite profile mismatches")
    s.add_argument("--ap-mode", choices=("interp_101", "all_points"), default="interp_101")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="re-render a stored evaluation")
    s.add_argument("--run-dir", type=Path, required=True)
    s.add_argument("--format", choices=("text", "csv", "markdown"), default="text")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataQualityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
