import json

import numpy as np
import pytest
from PIL import Image

from domainscope import pipeline
from domainscope.calibration import CalibrationProfile
from domainscope.dataset_io import labels_to_jsonl, load_dataset, write_dmap
from domainscope.geometry import DepthMap
from domainscope.labels import CATEGORIES, CATEGORY_LABELS, DomainLabelRecord, UNLABELED
from domainscope.pipeline import LabelingJob, LabelSummary, label_image, run_job
from domainscope.scene import BoundingBox


@pytest.fixture(scope="module")
def profile():
    return CalibrationProfile.default()


def gray_image(v=128, h=24, w=32):
    return np.full((h, w, 3), v, dtype=np.uint8)


def test_constant_gray_no_boxes_no_depth(profile):
    r = label_image(gray_image(), [], None, profile, image_id=5)
    assert r.image_id == 5 and r.profile_id == profile.profile_id
    assert r.labels == {
        "visibility": "low", "illumination": "medium", "color": "natural", "layout": "sparse",
        "scale": UNLABELED, "background": "simple", "orientation": UNLABELED, "perspective": UNLABELED,
    }
    assert r.reasons == {"scale": "no_objects", "orientation": "no_depth", "perspective": "no_depth"}
    assert r.metrics["visibility_score"] == 0.0 and r.metrics["background_score"] == 0.0
    assert r.metrics["median_luminance"] == 128.0 and r.metrics["color_distortion"] == 0.0


def test_constant_depth_gives_upright_nadir(profile):
    r = label_image(gray_image(), [], DepthMap(np.full((24, 32), 4.0)), profile)
    assert r.label("orientation") == "upright" and r.label("perspective") == "nadir"


def test_background_too_small(profile):
    r = label_image(gray_image(), [BoundingBox(0, 0, 32, 24, 1)], None, profile)
    assert r.label("background") == UNLABELED
    assert r.reasons["background"] == "background_too_small"
    assert r.label("scale") == "large"


def test_region_underpopulated(profile):
    boxes = [BoundingBox(0, 0, 16, 24, 1)]  # covers the whole left half
    r = label_image(gray_image(), boxes, DepthMap(np.ones((24, 32))), profile)
    assert r.reasons["orientation"] == r.reasons["perspective"] == "region_underpopulated"


def test_front_from_brightness_fallback(profile):
    img = gray_image()
    img[:12] = 220
    img[12:] = 60
    r = label_image(img, [], DepthMap(np.full((24, 32), 2.0)), profile)
    assert r.label("perspective") == "front" and r.label("orientation") == "upright"


def test_label_image_deterministic(profile):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (30, 40, 3), dtype=np.uint8)
    boxes = [BoundingBox(3, 4, 10, 8, 1)]
    depth = DepthMap(rng.uniform(0, 10, (30, 40)))
    a = label_image(img, boxes, depth, profile)
    b = label_image(img.copy(), list(boxes), DepthMap(depth.values.copy()), profile)
    assert labels_to_jsonl([a]) == labels_to_jsonl([b])


def test_summary_counts():
    recs = [DomainLabelRecord(i, {"visibility": v}) for i, v in enumerate(["low", "low", "high", "moderate"])]
    s = LabelSummary.from_records(recs)
    assert s.percentages("visibility") == {"low": 50.0, "moderate": 25.0, "high": 25.0}
    assert s.unlabeled["layout"] == {"unknown": 4}
    assert "visibility" in s.to_text()
    rows = s.to_csv().splitlines()
    assert rows[0] == "axis,category,label,count,percent"
    assert "appearance,visibility,low,2,50.00" in rows


def write_toy_dataset(tmp_path, n=3, corrupt=(), size_mismatch=()):
    (tmp_path / "img").mkdir()
    (tmp_path / "depth").mkdir()
    rng = np.random.default_rng(0)
    images, anns = [], []
    for i in range(1, n + 1):
        arr = rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)
        name = f"{i}.png"
        if i in corrupt:
            (tmp_path / "img" / name).write_bytes(b"garbage")
        else:
            Image.fromarray(arr if i not in size_mismatch else arr[:10]).save(tmp_path / "img" / name)
        images.append({"id": i, "file_name": name, "width": 24, "height": 20})
        anns.append({"id": i, "image_id": i, "category_id": 1, "bbox": [2, 2, 5, 5]})
        if i % 2:
            write_dmap(tmp_path / "depth" / f"{i}.dmap", rng.uniform(0, 5, (10, 12)))
    doc = {"images": images, "annotations": anns, "categories": [{"id": 1, "name": "a"}]}
    (tmp_path / "ann.json").write_text(json.dumps(doc))
    return load_dataset(tmp_path / "ann.json", tmp_path / "img")


def test_run_job_order_and_profile(tmp_path, profile):
    ds = write_toy_dataset(tmp_path, 2)
    recs, summary = run_job(LabelingJob(ds, profile, tmp_path / "depth"))
    assert [r.image_id for r in recs] == [1, 2]
    assert all(r.profile_id == profile.profile_id for r in recs)
    assert "orientation" not in recs[0].reasons  # 1.dmap exists
    assert recs[1].reasons["orientation"] == "no_depth"
    assert summary.n_images == 2


def test_run_job_summary_matches_records(tmp_path, profile):
    ds = write_toy_dataset(tmp_path, 6)
    recs, summary = run_job(LabelingJob(ds, profile, tmp_path / "depth"))
    for c in CATEGORIES:
        recount = {lab: sum(r.label(c) == lab for r in recs) for lab in CATEGORY_LABELS[c]}
        assert summary.counts[c] == recount
        pct = summary.percentages(c)
        if sum(recount.values()):
            assert abs(sum(pct.values()) - 100.0) < 1e-9


def test_worker_counts_identical(tmp_path, profile):
    ds = write_toy_dataset(tmp_path, 5)
    outs = {w: labels_to_jsonl(run_job(LabelingJob(ds, profile, tmp_path / "depth", w))[0]) for w in (1, 3)}
    assert outs[1] == outs[3]


def test_worker_count_validated(tmp_path, profile):
    ds = write_toy_dataset(tmp_path, 1)
    with pytest.raises(ValueError):
        LabelingJob(ds, profile, worker_count=0)


def test_failures_isolated_then_abort(tmp_path, profile):
    ds = write_toy_dataset(tmp_path, 3, corrupt={2})
    from dataclasses import replace
    lenient = replace(profile, max_failure_fraction=0.5)
    recs, summary = run_job(LabelingJob(ds, lenient))
    assert [r.image_id for r in recs] == [1, 3]
    assert [i for i, _ in summary.failures] == [2]
    with pytest.raises(pipeline.DataQualityError) as info:
        run_job(LabelingJob(ds, profile))
    assert info.value.failures[0][0] == 2


def test_size_mismatch_is_failure(tmp_path, profile):
    from dataclasses import replace
    ds = write_toy_dataset(tmp_path, 2, size_mismatch={1})
    recs, summary = run_job(LabelingJob(ds, replace(profile, max_failure_fraction=0.5)))
    assert [r.image_id for r in recs] == [2]
    assert "differs" in summary.failures[0][1]


def test_unreadable_depth_reason(tmp_path, profile):
    ds = write_toy_dataset(tmp_path, 1)
    (tmp_path / "depth" / "1.dmap").write_bytes(b"DMAPjunk")
    recs, _ = run_job(LabelingJob(ds, profile, tmp_path / "depth"))
    assert recs[0].reasons["orientation"] == pipeline.DEPTH_UNREADABLE
