import json
from pathlib import Path

import numpy as np
import pytest

from fomo_extractor.backends import BackendError, StubBackend, make_backend
from fomo_extractor.extract import ExtractionError, ExtractionJob, extract_proposals, load_coco
from fomo_extractor.tensorout import TensorWriteError, read_tensor, write_tensor

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def test_backend_spec_parsing():
    assert make_backend("stub:8").dim == 8
    with pytest.raises(BackendError):
        make_backend("stub:x")
    with pytest.raises(BackendError):
        make_backend("mystery:1")
    with pytest.raises(BackendError):
        make_backend("owlvit:")


def test_stub_backend_deterministic():
    b = StubBackend(12)
    boxes1, emb1 = b.extract(b"payload", 100, 80)
    boxes2, emb2 = b.extract(b"payload", 100, 80)
    assert np.array_equal(boxes1, boxes2)
    assert np.array_equal(emb1, emb2)
    boxes3, _ = b.extract(b"other payload", 100, 80)
    assert not np.array_equal(boxes1, boxes3)


def test_stub_backend_box_geometry():
    boxes, emb = StubBackend(8).extract(b"x", 64, 48)
    assert emb.shape == (4, 8)
    assert np.all(boxes[:, 0] < boxes[:, 2])
    assert np.all(boxes[:, 1] < boxes[:, 3])
    assert np.all(boxes[:, 2] <= 64) and np.all(boxes[:, 3] <= 48)


def test_tensorout_round_trip(tmp_path):
    mat = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(tmp_path / "t.fomo", mat)
    assert np.array_equal(read_tensor(tmp_path / "t.fomo"), mat)
    with pytest.raises(TensorWriteError):
        write_tensor(tmp_path / "bad.fomo", np.array([[np.inf]]))


def test_load_coco_shapes():
    class_names, images = load_coco(FIXTURES / "coco_annotations.json")
    assert class_names == ["fish", "jellyfish"]
    assert [img["id"] for img in images] == [1, 2]
    box, cls = images[0]["annotations"][0]
    assert box == [2.0, 3.0, 12.0, 11.0]  # xywh converted to corners
    assert cls == 0


def test_load_coco_rejects_bad_bbox(tmp_path):
    doc = json.loads((FIXTURES / "coco_annotations.json").read_text())
    doc["annotations"][0]["bbox"] = [2, 3, 0, 8]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ExtractionError):
        load_coco(path)


def test_extract_emits_manifest_and_continues_on_unreadable(tmp_path):
    doc = json.loads((FIXTURES / "coco_annotations.json").read_text())
    doc["images"].append({"id": 3, "file_name": "missing.png",
                          "width": 10, "height": 10})
    ann_path = tmp_path / "ann.json"
    ann_path.write_text(json.dumps(doc))
    job = ExtractionJob(image_dir=FIXTURES / "images", annotation_file=ann_path,
                        backend_spec="stub:16", out_dir=tmp_path / "out")
    manifest_path = extract_proposals(job)
    manifest = json.loads(manifest_path.read_text())
    assert len(manifest["images"]) == 2  # the unreadable image was skipped
    assert len(job.errors) == 1
    assert job.errors[0]["image_id"] == "3"
    assert (tmp_path / "out/errors.json").exists()


def test_extract_rerun_is_byte_identical(tmp_path):
    outs = []
    for tag in ("a", "b"):
        job = ExtractionJob(image_dir=FIXTURES / "images",
                            annotation_file=FIXTURES / "coco_annotations.json",
                            backend_spec="stub:16", out_dir=tmp_path / tag)
        extract_proposals(job)
        outs.append(tmp_path / tag)
    for rel in ("manifest.json", "tensors/1_prop.fomo", "tensors/1_box.fomo",
                "tensors/2_prop.fomo", "tensors/2_box.fomo"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_golden_fixture_is_current(tmp_path):
    """Regenerating with the same backend reproduces the checked-in goldens."""
    job = ExtractionJob(image_dir=FIXTURES / "images",
                        annotation_file=FIXTURES / "coco_annotations.json",
                        backend_spec="stub:16", out_dir=tmp_path)
    extract_proposals(job)
    for rel in ("manifest.json", "tensors/1_prop.fomo", "tensors/2_box.fomo"):
        assert (tmp_path / rel).read_bytes() == \
            (FIXTURES / "golden" / rel).read_bytes(), rel
