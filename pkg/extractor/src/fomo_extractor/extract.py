"""Proposal extraction over a COCO-annotated image set, emitted as a manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backends import make_backend
from .tensorout import write_tensor


class ExtractionError(Exception):
    pass


@dataclass
class ExtractionJob:
    image_dir: Path
    annotation_file: Path
    backend_spec: str
    out_dir: Path
    errors: list = field(default_factory=list)


def load_coco(path):
    """(class_names, images) where images = [{id, file_name, width, height,
    annotations: [(box xyxy, class_index)]}] in file order."""
    doc = json.loads(Path(path).read_text())
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ExtractionError(f"{path}: missing COCO key {key!r}")
    categories = sorted(doc["categories"], key=lambda c: c["id"])
    class_names = [c["name"] for c in categories]
    cat_to_idx = {c["id"]: i for i, c in enumerate(categories)}
    by_image = {}
    order = []
    for img in doc["images"]:
        by_image[img["id"]] = {
            "id": img["id"],
            "file_name": img["file_name"],
            "width": float(img["width"]),
            "height": float(img["height"]),
            "annotations": [],
        }
        order.append(img["id"])
    for ann in doc["annotations"]:
        if ann["image_id"] not in by_image:
            raise ExtractionError(f"annotation references unknown image {ann['image_id']}")
        x, y, w, h = ann["bbox"]
        if w <= 0 or h <= 0:
            raise ExtractionError(f"degenerate bbox {ann['bbox']} on image {ann['image_id']}")
        box = [float(x), float(y), float(x + w), float(y + h)]
        cls = cat_to_idx.get(ann["category_id"])
        if cls is None:
            raise ExtractionError(f"unknown category id {ann['category_id']}")
        by_image[ann["image_id"]]["annotations"].append((box, cls))
    return class_names, [by_image[i] for i in order]


def extract_proposals(job: ExtractionJob) -> Path:
    """Run the detector over every image; write tensors plus the manifest.

    Unreadable images produce an error record and are skipped; the job
    continues. Returns the manifest path.
    """
    backend = make_backend(job.backend_spec)
    class_names, images = load_coco(job.annotation_file)
    out = Path(job.out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)

    records = []
    for img in images:
        image_id = str(img["id"])
        path = Path(job.image_dir) / img["file_name"]
        try:
            payload = path.read_bytes()
        except OSError as exc:
            job.errors.append({"image_id": image_id, "file": str(path),
                               "error": str(exc)})
            continue
        boxes, emb = backend.extract(payload, img["width"], img["height"])
        prop_rel = f"tensors/{image_id}_prop.fomo"
        box_rel = f"tensors/{image_id}_box.fomo"
        write_tensor(out / prop_rel, emb)
        write_tensor(out / box_rel, boxes)
        records.append({
            "image_id": image_id,
            "proposal_tensor": prop_rel,
            "box_tensor": box_rel,
            "annotations": [{"box": box, "class_index": cls}
                            for box, cls in img["annotations"]],
        })

    manifest = {
        "embedding_dim": backend.dim,
        "class_names": class_names,
        "images": records,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if job.errors:
        (out / "errors.json").write_text(
            json.dumps(job.errors, indent=2, sort_keys=True) + "\n")
    return manifest_path
