import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from domainscope import dataset_io as dio
from domainscope.calibration import CalibrationProfile
from domainscope.dataset_io import DatasetError
from domainscope.labels import DomainLabelRecord, CATEGORIES, UNLABELED


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def coco(images=None, annotations=None, categories=None):
    return {
        "images": images if images is not None else [{"id": 1, "file_name": "a.png", "width": 20, "height": 10}],
        "annotations": annotations if annotations is not None else [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [1, 1, 4, 4]}],
        "categories": categories if categories is not None else [{"id": 1, "name": "echinus"}],
    }


def test_minimal_dataset(tmp_path):
    idx = dio.load_dataset(write_json(tmp_path / "a.json", coco()), tmp_path)
    assert len(idx.images) == 1 and len(idx.categories) == 1
    assert idx.boxes(1) == [dio.BoundingBox(1, 1, 4, 4, 1)]
    assert idx.image(1).path == tmp_path / "a.png"
    assert idx.boxes(99) == []


def test_unknown_image_reference(tmp_path):
    doc = coco(annotations=[{"id": 1, "image_id": 7, "category_id": 1, "bbox": [0, 0, 1, 1]}])
    with pytest.raises(DatasetError, match="7"):
        dio.load_dataset(write_json(tmp_path / "a.json", doc), tmp_path)


def test_unknown_category_reference(tmp_path):
    doc = coco(annotations=[{"id": 1, "image_id": 1, "category_id": 3, "bbox": [0, 0, 1, 1]}])
    with pytest.raises(DatasetError, match="category"):
        dio.load_dataset(write_json(tmp_path / "a.json", doc), tmp_path)


def test_clamped_box(tmp_path):
    doc = coco(annotations=[{"id": 1, "image_id": 1, "category_id": 1, "bbox": [15, 5, 10, 10]},
                            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [2, 2, 3, 3]}])
    idx = dio.load_dataset(write_json(tmp_path / "a.json", doc), tmp_path)
    assert idx.clamped == 1
    assert idx.boxes(1)[0] == dio.BoundingBox(15, 5, 5, 5, 1)


def test_box_outside_image_dropped(tmp_path):
    doc = coco(annotations=[{"id": 1, "image_id": 1, "category_id": 1, "bbox": [30, 5, 3, 3]}])
    idx = dio.load_dataset(write_json(tmp_path / "a.json", doc), tmp_path)
    assert idx.dropped == 1 and idx.boxes(1) == []


def test_annotations_ordered_by_id(tmp_path):
    doc = coco(annotations=[{"id": 5, "image_id": 1, "category_id": 1, "bbox": [5, 0, 1, 1]},
                            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [2, 0, 1, 1]}])
    idx = dio.load_dataset(write_json(tmp_path / "a.json", doc), tmp_path)
    assert [b.x for b in idx.boxes(1)] == [2, 5]


def test_images_sorted_by_id(tmp_path):
    doc = coco(images=[{"id": 9, "file_name": "b.png", "width": 4, "height": 4},
                       {"id": 3, "file_name": "a.png", "width": 4, "height": 4}], annotations=[])
    assert dio.load_dataset(write_json(tmp_path / "a.json", doc), tmp_path).image_ids == [3, 9]


@pytest.mark.parametrize("doc, msg", [
    ([], "object"),
    ({"images": []}, "annotations"),
    (coco(images=[{"id": 1, "file_name": "a", "width": 0, "height": 3}], annotations=[]), "size"),
    (coco(images=[{"id": 1, "file_name": "a", "width": 2, "height": 3}] * 2, annotations=[]), "duplicate"),
    (coco(annotations=[{"image_id": 1, "category_id": 1, "bbox": [0, 0]}]), "bbox"),
    (coco(images=[{"file_name": "a", "width": 2, "height": 3}]), "'id'"),
])
def test_malformed_annotations(tmp_path, doc, msg):
    with pytest.raises(DatasetError, match=msg):
        dio.load_dataset(write_json(tmp_path / "a.json", doc), tmp_path)


def test_invalid_json_position(tmp_path):
    p = tmp_path / "a.json"
    p.write_text('{"images": [\n  1,,\n]}')
    with pytest.raises(DatasetError, match="line 2"):
        dio.load_dataset(p, tmp_path)


@pytest.fixture
def index(tmp_path):
    return dio.load_dataset(write_json(tmp_path / "a.json", coco()), tmp_path)


def test_detections(tmp_path, index):
    assert dio.load_detections(write_json(tmp_path / "d.json", []), index) == {}
    dets = [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 2, 2], "score": 0.9},
            {"image_id": 1, "category_id": 1, "bbox": [3, 3, 2, 2], "score": 0.1}]
    out = dio.load_detections(write_json(tmp_path / "d.json", dets), index)
    assert len(out[1]) == 2 and out[1][0].score == 0.9 and out[1][0].category_id == 1


@pytest.mark.parametrize("det, msg", [
    ({"image_id": 1, "category_id": 1, "bbox": [0, 0, 2, 2], "score": 1.5}, "score"),
    ({"image_id": 4, "category_id": 1, "bbox": [0, 0, 2, 2], "score": 0.5}, "image_id"),
    ({"image_id": 1, "category_id": 8, "bbox": [0, 0, 2, 2], "score": 0.5}, "category_id"),
    ({"image_id": 1, "category_id": 1, "bbox": [0, 0, 0, 2], "score": 0.5}, "size"),
])
def test_detection_validation(tmp_path, index, det, msg):
    with pytest.raises(DatasetError, match=msg):
        dio.load_detections(write_json(tmp_path / "d.json", [det]), index)


def test_load_image_formats(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (6, 7, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "a.png")
    np.testing.assert_array_equal(dio.load_image(tmp_path / "a.png"), rgb)
    Image.fromarray(rgb[..., 0]).save(tmp_path / "g.png")
    assert dio.load_image(tmp_path / "g.png").shape == (6, 7, 3)
    Image.fromarray(rgb).save(tmp_path / "a.jpg", quality=95)
    assert dio.load_image(tmp_path / "a.jpg").shape == (6, 7, 3)
    Image.fromarray(rgb).save(tmp_path / "a.bmp")
    with pytest.raises(DatasetError, match="format"):
        dio.load_image(tmp_path / "a.bmp")
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DatasetError):
        dio.load_image(tmp_path / "bad.png")


def test_dmap_roundtrip(tmp_path):
    dio.write_dmap(tmp_path / "d.dmap", np.array([[0, 1], [2, 3]], dtype=float))
    dm = dio.load_depth(tmp_path / "d.dmap", 2, 2, CalibrationProfile())
    assert dm.values.tolist() == [[0, 1], [2, 3]]
    raw = (tmp_path / "d.dmap").read_bytes()
    assert raw[:4] == b"DMAP" and len(raw) == 16 + 16


def test_dmap_corrupt(tmp_path):
    (tmp_path / "x.dmap").write_bytes(b"DMAP\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00\x00\x00" + b"\0" * 8)
    with pytest.raises(DatasetError, match="bytes"):
        dio.read_dmap(tmp_path / "x.dmap")
    (tmp_path / "y.dmap").write_bytes(b"XXXX" + b"\0" * 12)
    with pytest.raises(DatasetError, match="magic"):
        dio.read_dmap(tmp_path / "y.dmap")


def test_depth_png(tmp_path):
    Image.fromarray(np.zeros((3, 4), dtype=np.uint16)).save(tmp_path / "z.png")
    dm = dio.load_depth(tmp_path / "z.png", 4, 3, CalibrationProfile())
    assert not dm.values.any()
    vals = np.array([[1.5, 2.25], [10.0, 0.001]])
    dio.write_depth_png(tmp_path / "d.png", vals)
    np.testing.assert_allclose(dio.read_depth_png(tmp_path / "d.png", 1000.0), vals)
    Image.fromarray(np.zeros((3, 4), dtype=np.uint8)).save(tmp_path / "8bit.png")
    with pytest.raises(DatasetError, match="16-bit"):
        dio.read_depth_png(tmp_path / "8bit.png", 1000.0)


def test_depth_scale_applied(tmp_path):
    dio.write_dmap(tmp_path / "d.dmap", np.full((2, 2), 2.0))
    dm = dio.load_depth(tmp_path / "d.dmap", 2, 2, CalibrationProfile(depth_scale=3.0))
    assert (dm.values == 6.0).all()


def test_bilinear_upsample_corners():
    src = np.arange(16, dtype=float).reshape(4, 4) ** 1.5
    up = dio.resize_bilinear(src, 8, 8)
    assert up.shape == (8, 8)
    for (y, x), (sy, sx) in {(0, 0): (0, 0), (0, 7): (0, 3), (7, 0): (3, 0), (7, 7): (3, 3)}.items():
        assert up[y, x] == src[sy, sx]
    lin = np.add.outer(np.arange(4.0), 2 * np.arange(4.0))
    np.testing.assert_allclose(dio.resize_bilinear(lin, 7, 7),
                               np.add.outer(np.linspace(0, 3, 7), 2 * np.linspace(0, 3, 7)))


def test_find_depth(tmp_path):
    assert dio.find_depth(None, 1) is None
    assert dio.find_depth(tmp_path, 1) is None
    (tmp_path / "1.png").write_bytes(b"")
    assert dio.find_depth(tmp_path, 1).name == "1.png"
    (tmp_path / "1.dmap").write_bytes(b"")
    assert dio.find_depth(tmp_path, 1).name == "1.dmap"


def make_record(i=3, **labels):
    labs = {c: "unlabeled" for c in CATEGORIES}
    labs.update(visibility="low", illumination="dark", color="blue", layout="sparse", background="simple")
    labs.update(labels)
    return DomainLabelRecord(i, labs, {"scale": "no_objects", "orientation": "no_depth", "perspective": "no_depth"},
                             {"tenengrad": 1.5, "blue_green_ratio": math.inf, "object_count": 0.0}, "abc")


def test_labels_roundtrip(tmp_path):
    p = tmp_path / "l.jsonl"
    dio.write_labels([], p)
    assert p.read_text() == ""
    rec = make_record()
    dio.write_labels([rec], p)
    assert len(p.read_text().splitlines()) == 1
    back = dio.read_labels(p)
    assert back == [rec]
    assert back[0].reasons["scale"] == "no_objects"
    assert '"inf"' in p.read_text()


def test_labels_bad_line(tmp_path):
    p = tmp_path / "l.jsonl"
    p.write_text(json.dumps(make_record().to_json()) + "\n{oops\n")
    with pytest.raises(DatasetError, match="line 2"):
        dio.read_labels(p)


def test_labels_schema_version_checked(tmp_path):
    obj = make_record().to_json()
    obj["v"] = "v0"
    p = tmp_path / "l.jsonl"
    p.write_text(json.dumps(obj) + "\n")
    with pytest.raises(DatasetError, match="schema"):
        dio.read_labels(p)


def test_labels_csv(tmp_path):
    dio.write_labels_csv([make_record()], tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0].startswith("image_id,profile_id,visibility")
    assert "unlabeled:no_objects" in lines[1]


label_st = st.fixed_dictionaries({c: st.sampled_from(["low", "unlabeled"]) if c == "visibility"
                                  else st.just(UNLABELED) for c in CATEGORIES})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9), label_st,
       st.dictionaries(st.sampled_from(["tenengrad", "coverage", "delta_lr"]),
                       st.floats(allow_nan=False), max_size=3))
def test_record_json_roundtrip(image_id, labels, metrics):
    rec = DomainLabelRecord(image_id, labels, {}, metrics, "p")
    line = dio.labels_to_jsonl([rec])
    assert DomainLabelRecord.from_json(json.loads(line)) == rec
