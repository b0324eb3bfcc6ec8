import hashlib
import json
import struct

import numpy as np
import pytest

from fomo.tensorio import (AnnotationRecord, BadMagicError, DtypeMismatchError,
                           ImageRecord, Manifest, ManifestError, SizeMismatchError,
                           TensorIOError, load_manifest, read_tensor, save_manifest,
                           write_tensor)


def test_round_trip_1x1(tmp_path):
    path = tmp_path / "t.fomo"
    write_tensor(path, np.array([[0.0]], dtype=np.float32))
    blob = path.read_bytes()
    # magic + u32 dtype + u32 ndim + 2 u64 dims + 4 payload bytes
    assert blob[:4] == b"FOMO"
    dtype, ndim = struct.unpack("<II", blob[4:12])
    assert dtype == 0 and ndim == 2
    assert struct.unpack("<QQ", blob[12:28]) == (1, 1)
    assert len(blob) == 28 + 4
    back = read_tensor(path)
    assert back.shape == (1, 1)
    assert back[0, 0] == 0.0


def test_round_trip_2x3_ones(tmp_path):
    path = tmp_path / "t.fomo"
    mat = np.ones((2, 3), dtype=np.float32)
    write_tensor(path, mat)
    back = read_tensor(path)
    assert back.tobytes() == mat.tobytes()


def test_round_trip_large_random_hash(tmp_path):
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((100, 768)).astype(np.float32)
    before = hashlib.sha256(mat.tobytes()).hexdigest()
    path = tmp_path / "t.fomo"
    write_tensor(path, mat)
    after = hashlib.sha256(read_tensor(path).tobytes()).hexdigest()
    assert before == after


def test_round_trip_property_random_shapes(tmp_path):
    rng = np.random.default_rng(42)
    for i in range(25):
        if i % 3 == 0:
            mat = rng.standard_normal(int(rng.integers(1, 40))).astype(np.float32)
        else:
            mat = rng.standard_normal(
                (int(rng.integers(1, 20)), int(rng.integers(1, 20)))).astype(np.float32)
        path = tmp_path / f"t{i}.fomo"
        write_tensor(path, mat)
        back = read_tensor(path)
        assert back.shape == mat.shape
        assert back.tobytes() == mat.tobytes()


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.fomo"
    write_tensor(path, np.ones((2, 3), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(SizeMismatchError):
        read_tensor(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "t.fomo"
    write_tensor(path, np.ones((1, 1), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_dtype_mismatch(tmp_path):
    path = tmp_path / "t.fomo"
    write_tensor(path, np.ones((1, 1), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 7)
    path.write_bytes(bytes(blob))
    with pytest.raises(DtypeMismatchError):
        read_tensor(path)


def test_non_finite_rejected(tmp_path):
    with pytest.raises(TensorIOError):
        write_tensor(tmp_path / "t.fomo", np.array([[np.nan]], dtype=np.float32))
    with pytest.raises(TensorIOError):
        write_tensor(tmp_path / "t.fomo", np.array([[np.inf]], dtype=np.float32))


def test_only_1d_2d(tmp_path):
    with pytest.raises(TensorIOError):
        write_tensor(tmp_path / "t.fomo", np.ones((2, 2, 2), dtype=np.float32))


# --- manifest ----------------------------------------------------------------


def make_manifest_doc(tmp_path, dim=4, n_images=2, proposals=3):
    rng = np.random.default_rng(1)
    (tmp_path / "tensors").mkdir(exist_ok=True)
    images = []
    for i in range(n_images):
        prop_rel = f"tensors/img{i}_prop.fomo"
        box_rel = f"tensors/img{i}_box.fomo"
        write_tensor(tmp_path / prop_rel,
                     rng.standard_normal((proposals, dim)).astype(np.float32))
        boxes = np.array([[0, 0, 10, 10], [5, 5, 20, 30], [1, 2, 3, 4]][:proposals],
                         dtype=np.float32)
        write_tensor(tmp_path / box_rel, boxes)
        images.append({
            "image_id": f"img{i}",
            "proposal_tensor": prop_rel,
            "box_tensor": box_rel,
            "annotations": [{"box": [0.0, 0.0, 10.0, 10.0], "class_index": 0}],
        })
    return {"embedding_dim": dim, "class_names": ["cat", "dog"], "images": images}


def test_manifest_valid(tmp_path):
    doc = make_manifest_doc(tmp_path)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    manifest = load_manifest(path)
    assert manifest.embedding_dim == 4
    assert len(manifest.images) == 2
    assert manifest.images[0].annotations[0].class_index == 0
    emb, boxes = manifest.load_proposals(manifest.images[0])
    assert emb.shape == (3, 4) and boxes.shape == (3, 4)


def test_manifest_dimension_mismatch(tmp_path):
    doc = make_manifest_doc(tmp_path, dim=4)
    doc["embedding_dim"] = 8
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_rejects_every_single_field_corruption(tmp_path):
    base = make_manifest_doc(tmp_path)
    path = tmp_path / "manifest.json"

    def corrupt(mutate):
        doc = json.loads(json.dumps(base))
        mutate(doc)
        path.write_text(json.dumps(doc))
        with pytest.raises(ManifestError):
            load_manifest(path)

    corrupt(lambda d: d.update(embedding_dim=-1))
    corrupt(lambda d: d.update(embedding_dim="4"))
    corrupt(lambda d: d.update(class_names=[]))
    corrupt(lambda d: d.update(class_names=["cat", "cat"]))
    corrupt(lambda d: d["images"][0].update(proposal_tensor="tensors/missing.fomo"))
    corrupt(lambda d: d["images"][0].update(box_tensor="tensors/missing.fomo"))
    corrupt(lambda d: d["images"][0]["annotations"][0].update(class_index=2))
    corrupt(lambda d: d["images"][0]["annotations"][0].update(box=[10, 0, 0, 10]))
    corrupt(lambda d: d["images"][0]["annotations"][0].update(box=[0, 0, 10]))
    corrupt(lambda d: d["images"][0].update(image_id=""))
    corrupt(lambda d: d["images"][1].update(image_id="img0"))
    # boxes tensor with wrong trailing dim
    write_tensor(tmp_path / "tensors/bad_box.fomo", np.ones((3, 5), dtype=np.float32))
    corrupt(lambda d: d["images"][0].update(box_tensor="tensors/bad_box.fomo"))
    # proposal/box row count disagreement
    write_tensor(tmp_path / "tensors/two_box.fomo",
                 np.array([[0, 0, 1, 1], [0, 0, 2, 2]], dtype=np.float32))
    corrupt(lambda d: d["images"][0].update(box_tensor="tensors/two_box.fomo"))
    corrupt(lambda d: d.update(attribute_file="missing.json"))


def test_manifest_attribute_file_dim_checked(tmp_path):
    doc = make_manifest_doc(tmp_path, dim=4)
    write_tensor(tmp_path / "attrs.fomo", np.ones((5, 3), dtype=np.float32))
    (tmp_path / "attrs.json").write_text(json.dumps({"embedding_tensor": "attrs.fomo"}))
    doc["attribute_file"] = "attrs.json"
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_manifest(path)
    write_tensor(tmp_path / "attrs.fomo", np.ones((5, 4), dtype=np.float32))
    load_manifest(path)


def test_manifest_aquatic_sized_split(tmp_path):
    # the Aquatic split: 318 train / 319 test images, 7 classes
    dim = 2
    names = ["Fish", "Jellyfish", "Penguin", "Shark", "Puffin", "Stingray", "Starfish"]
    (tmp_path / "tensors").mkdir()
    rng = np.random.default_rng(3)

    def build(split, n_images):
        images = []
        for i in range(n_images):
            prop_rel = f"tensors/{split}{i}_p.fomo"
            box_rel = f"tensors/{split}{i}_b.fomo"
            write_tensor(tmp_path / prop_rel, rng.standard_normal((1, dim)).astype(np.float32))
            write_tensor(tmp_path / box_rel, np.array([[0, 0, 4, 4]], dtype=np.float32))
            images.append({"image_id": f"{split}{i}", "proposal_tensor": prop_rel,
                           "box_tensor": box_rel,
                           "annotations": [{"box": [0.0, 0.0, 4.0, 4.0],
                                            "class_index": i % 7}]})
        doc = {"embedding_dim": dim, "class_names": names, "images": images}
        path = tmp_path / f"{split}.json"
        path.write_text(json.dumps(doc))
        return path

    train = build("train", 318)
    test = build("test", 319)
    assert len(load_manifest(train).images) == 318
    assert len(load_manifest(test).images) == 319
    # validates iff the files exist
    (tmp_path / "tensors/train0_p.fomo").unlink()
    with pytest.raises(ManifestError):
        load_manifest(train)


def test_save_manifest_round_trip(tmp_path):
    doc = make_manifest_doc(tmp_path)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    manifest = load_manifest(path)
    out = tmp_path / "copy.json"
    save_manifest(manifest, out)
    again = load_manifest(out)
    assert again.class_names == manifest.class_names
    assert [r.image_id for r in again.images] == [r.image_id for r in manifest.images]
