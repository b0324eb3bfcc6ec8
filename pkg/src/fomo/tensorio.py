"""Bit-exact float32 tensor files and the embedding manifest that references them.

This file format is the contract between the embedding extractor and the
rest of the pipeline: a tiny self-describing binary header followed by
row-major little-endian float32 scalars, plus a JSON manifest that ties
per-image proposal/box tensors and annotations together.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FOMO"
DTYPE_FLOAT32 = 0

# magic(4) + dtype u32 + ndim u32, then one u64 extent per dim, then payload
_FIXED_HEADER = struct.Struct("<4sII")


class TensorIOError(Exception):
    """Base error for tensor file and manifest problems."""


class BadMagicError(TensorIOError):
    pass


class DtypeMismatchError(TensorIOError):
    pass


class SizeMismatchError(TensorIOError):
    pass


class ManifestError(TensorIOError):
    pass


def write_tensor(path, matrix) -> None:
    """Write a 1-D or 2-D float32 tensor; read_tensor(path) is bit-identical."""
    arr = np.ascontiguousarray(matrix, dtype=np.float32)
    if arr.ndim not in (1, 2):
        raise TensorIOError(f"only 1-D or 2-D tensors supported, got ndim={arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise TensorIOError(f"all dims must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TensorIOError("refusing to write non-finite values")
    header = _FIXED_HEADER.pack(MAGIC, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor file written by write_tensor (or any conforming writer)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FIXED_HEADER.size:
        raise SizeMismatchError(f"{path}: file shorter than the fixed header")
    magic, dtype_code, ndim = _FIXED_HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if dtype_code != DTYPE_FLOAT32:
        raise DtypeMismatchError(f"{path}: dtype code {dtype_code}, only float32 (0) supported")
    if ndim not in (1, 2):
        raise TensorIOError(f"{path}: ndim must be 1 or 2, got {ndim}")
    dims_end = _FIXED_HEADER.size + 8 * ndim
    if len(blob) < dims_end:
        raise SizeMismatchError(f"{path}: truncated dimension block")
    dims = struct.unpack(f"<{ndim}Q", blob[_FIXED_HEADER.size:dims_end])
    if any(d < 1 for d in dims):
        raise TensorIOError(f"{path}: all dims must be >= 1, got {dims}")
    expected = 4 * int(np.prod(dims))
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} require {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return arr.astype(np.float32, copy=True)


@dataclass(frozen=True)
class AnnotationRecord:
    """One ground-truth box: absolute pixel corners, ordered x1<x2, y1<y2."""

    image_id: str
    box: tuple[float, float, float, float]
    class_index: int


@dataclass
class ImageRecord:
    image_id: str
    proposal_tensor: str
    box_tensor: str
    annotations: list[AnnotationRecord] = field(default_factory=list)


@dataclass
class Manifest:
    embedding_dim: int
    class_names: list[str]
    images: list[ImageRecord]
    attribute_file: str | None = None
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_proposals(self, record: ImageRecord) -> tuple[np.ndarray, np.ndarray]:
        """Return (embeddings P x D, boxes P x 4) for one image record."""
        emb = read_tensor(self.resolve(record.proposal_tensor))
        boxes = read_tensor(self.resolve(record.box_tensor))
        return np.atleast_2d(emb), np.atleast_2d(boxes)

    @property
    def annotations(self) -> list[AnnotationRecord]:
        return [ann for rec in self.images for ann in rec.annotations]


def _check_box(box, where: str) -> tuple[float, float, float, float]:
    if not isinstance(box, (list, tuple)) or len(box) != 4:
        raise ManifestError(f"{where}: box must be [x1, y1, x2, y2], got {box!r}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not all(np.isfinite(v) for v in (x1, y1, x2, y2)):
        raise ManifestError(f"{where}: box coordinates must be finite, got {box!r}")
    if not (x1 < x2 and y1 < y2):
        raise ManifestError(f"{where}: box corners must be ordered x1<x2, y1<y2, got {box!r}")
    return (x1, y1, x2, y2)


def load_manifest(path) -> Manifest:
    """Parse and eagerly validate a manifest; any violation raises ManifestError."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot parse manifest: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    root = path.parent

    dim = doc.get("embedding_dim")
    if not isinstance(dim, int) or dim < 1:
        raise ManifestError(f"{path}: embedding_dim must be a positive integer, got {dim!r}")
    names = doc.get("class_names")
    if (not isinstance(names, list) or not names
            or any(not isinstance(n, str) or not n for n in names)):
        raise ManifestError(f"{path}: class_names must be a nonempty list of strings")
    if len(set(names)) != len(names):
        raise ManifestError(f"{path}: class_names contains duplicates")

    attr_file = doc.get("attribute_file")
    if attr_file is not None:
        if not isinstance(attr_file, str):
            raise ManifestError(f"{path}: attribute_file must be a string path")
        attr_path = root / attr_file
        if not attr_path.exists():
            raise ManifestError(f"{path}: attribute_file {attr_file} does not exist")
        _validate_attribute_tensor(attr_path, dim)

    raw_images = doc.get("images")
    if not isinstance(raw_images, list):
        raise ManifestError(f"{path}: images must be a list")
    images: list[ImageRecord] = []
    seen_ids: set[str] = set()
    for i, raw in enumerate(raw_images):
        where = f"{path}: images[{i}]"
        if not isinstance(raw, dict):
            raise ManifestError(f"{where}: must be an object")
        image_id = raw.get("image_id")
        if not isinstance(image_id, str) or not image_id:
            raise ManifestError(f"{where}: image_id must be a nonempty string")
        if image_id in seen_ids:
            raise ManifestError(f"{where}: duplicate image_id {image_id!r}")
        seen_ids.add(image_id)
        prop_rel = raw.get("proposal_tensor")
        box_rel = raw.get("box_tensor")
        for key, rel in (("proposal_tensor", prop_rel), ("box_tensor", box_rel)):
            if not isinstance(rel, str):
                raise ManifestError(f"{where}: {key} must be a string path")
            if not (root / rel).exists():
                raise ManifestError(f"{where}: {key} {rel} does not exist")
        emb = read_tensor(root / prop_rel)
        boxes = read_tensor(root / box_rel)
        emb, boxes = np.atleast_2d(emb), np.atleast_2d(boxes)
        if emb.shape[1] != dim:
            raise ManifestError(
                f"{where}: proposal tensor trailing dim {emb.shape[1]} != embedding_dim {dim}"
            )
        if boxes.shape[1] != 4:
            raise ManifestError(f"{where}: box tensor trailing dim {boxes.shape[1]} != 4")
        if emb.shape[0] != boxes.shape[0]:
            raise ManifestError(
                f"{where}: {emb.shape[0]} proposal embeddings but {boxes.shape[0]} boxes"
            )
        annotations = []
        raw_anns = raw.get("annotations", [])
        if not isinstance(raw_anns, list):
            raise ManifestError(f"{where}: annotations must be a list")
        for j, ann in enumerate(raw_anns):
            ann_where = f"{where}.annotations[{j}]"
            if not isinstance(ann, dict):
                raise ManifestError(f"{ann_where}: must be an object")
            box = _check_box(ann.get("box"), ann_where)
            cls = ann.get("class_index")
            if not isinstance(cls, int) or not (0 <= cls < len(names)):
                raise ManifestError(
                    f"{ann_where}: class_index {cls!r} out of range for {len(names)} classes"
                )
            annotations.append(AnnotationRecord(image_id=image_id, box=box, class_index=cls))
        images.append(ImageRecord(image_id, prop_rel, box_rel, annotations))

    return Manifest(embedding_dim=dim, class_names=list(names), images=images,
                    attribute_file=attr_file, root=root)


def _validate_attribute_tensor(attr_path: Path, dim: int) -> None:
    # The attribute file is a catalog JSON; only its tensor reference is
    # tensorio's business (existence + trailing dim D).
    try:
        doc = json.loads(attr_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{attr_path}: cannot parse attribute file: {exc}") from exc
    rel = doc.get("embedding_tensor") if isinstance(doc, dict) else None
    if rel is None:
        return
    tensor_path = attr_path.parent / rel
    if not tensor_path.exists():
        raise ManifestError(f"{attr_path}: embedding_tensor {rel} does not exist")
    emb = np.atleast_2d(read_tensor(tensor_path))
    if emb.shape[1] != dim:
        raise ManifestError(
            f"{attr_path}: attribute tensor trailing dim {emb.shape[1]} != embedding_dim {dim}"
        )


def manifest_to_dict(manifest: Manifest) -> dict:
    doc: dict = {
        "embedding_dim": manifest.embedding_dim,
        "class_names": list(manifest.class_names),
        "images": [
            {
                "image_id": rec.image_id,
                "proposal_tensor": rec.proposal_tensor,
                "box_tensor": rec.box_tensor,
                "annotations": [
                    {"box": list(a.box), "class_index": a.class_index}
                    for a in rec.annotations
                ],
            }
            for rec in manifest.images
        ],
    }
    if manifest.attribute_file is not None:
        doc["attribute_file"] = manifest.attribute_file
    return doc


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n")
