"""Benchmark construction: frequency-based class splits, few-shot sampling,
and a synthetic embedding world for desk-scale end-to-end checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedspace import AttributeCatalog, AttributeEntry, save_catalog
from .inference import save_text_bank
from .tensorio import (AnnotationRecord, ImageRecord, Manifest, save_manifest,
                       write_tensor)


class BenchError(Exception):
    pass


@dataclass
class SplitPlan:
    dataset_name: str
    class_names: list[str]
    instance_counts: list[int]
    t1_known: list[str]
    t1_unknown: list[str]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "class_names": self.class_names,
            "instance_counts": self.instance_counts,
            "t1_known": self.t1_known,
            "t1_unknown": self.t1_unknown,
            "warnings": self.warnings,
        }


def save_split(plan: SplitPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")


def load_split(path) -> SplitPlan:
    doc = json.loads(Path(path).read_text())
    return SplitPlan(
        dataset_name=doc["dataset_name"],
        class_names=list(doc["class_names"]),
        instance_counts=list(doc["instance_counts"]),
        t1_known=list(doc["t1_known"]),
        t1_unknown=list(doc["t1_unknown"]),
        warnings=list(doc.get("warnings", [])),
    )


def build_split(manifest: Manifest, dataset_name: str) -> SplitPlan:
    """Most-common half of the classes (by train instance count) becomes the
    task-1 known set; ties break toward the lower class index. Odd counts give
    the extra class to the known half."""
    names = manifest.class_names
    if len(names) < 2:
        raise BenchError("need at least 2 classes to build a split")
    counts = [0] * len(names)
    for ann in manifest.annotations:
        counts[ann.class_index] += 1
    if sum(1 for c in counts if c > 0) < 2:
        raise BenchError("need at least 2 classes with instances")
    order = sorted(range(len(names)), key=lambda i: (-counts[i], i))
    n_known = (len(names) + 1) // 2
    known = [names[i] for i in order[:n_known]]
    unknown = [names[i] for i in order[n_known:]]
    warnings = [f"class {names[i]!r} has zero train instances"
                for i in range(len(names)) if counts[i] == 0]
    return SplitPlan(dataset_name=dataset_name, class_names=list(names),
                     instance_counts=counts, t1_known=known, t1_unknown=unknown,
                     warnings=warnings)


def sample_shots(manifest: Manifest, plan: SplitPlan, n_shots: int,
                 seed: int) -> list[AnnotationRecord]:
    """Uniformly sample min(n_shots, available) GT instances per known class."""
    if n_shots < 1:
        raise BenchError(f"n_shots must be >= 1, got {n_shots}")
    name_to_idx = {n: i for i, n in enumerate(manifest.class_names)}
    per_class: dict[str, list[AnnotationRecord]] = {n: [] for n in plan.t1_known}
    for ann in manifest.annotations:
        name = manifest.class_names[ann.class_index]
        if name in per_class:
            per_class[name].append(ann)
    picked: list[AnnotationRecord] = []
    for name in plan.t1_known:
        pool = per_class[name]
        if not pool:
            raise BenchError(f"class {name!r} has no instances to sample")
        take = min(n_shots, len(pool))
        rng = np.random.default_rng([seed, name_to_idx[name]])
        idxs = sorted(rng.choice(len(pool), size=take, replace=False).tolist())
        picked.extend(pool[i] for i in idxs)
    return picked


@dataclass
class SyntheticWorld:
    basis: np.ndarray          # N x D attribute directions
    w_star: np.ndarray         # K_all x N planted weights (n_star nonzeros per row)
    supports: list[list[int]]  # per-class planted attribute indices
    class_names: list[str]
    known: list[str]
    unknown: list[str]
    sigma: float
    seed: int
    class_directions: np.ndarray  # K_all x D, noiseless normalized combinations


def _unit(v):
    return v / np.linalg.norm(v)


def _make_distractor(rng, basis, leak=0.1, max_cos=0.2):
    """Unit vector leaning into the orthogonal complement of span(basis)."""
    n, d = basis.shape
    while True:
        q = rng.normal(size=d)
        q = q - basis.T @ (basis @ q)  # basis rows are orthonormal
        norm = np.linalg.norm(q)
        if norm < 1e-9:
            continue
        q = q / norm
        p = _unit(basis.T @ rng.normal(size=n))
        cand = _unit(q + leak * p)
        if np.abs(basis @ cand).max() <= max_cos:
            return cand


# fixed image canvas; disjoint slots keep GT boxes IoU 0 against each other
_CANVAS = (640.0, 480.0)
_SLOT = 80.0
_SLOTS_PER_ROW = int(_CANVAS[0] // _SLOT)
_SLOTS_PER_IMAGE = 8


def _slot_box(slot: int) -> tuple[float, float, float, float]:
    row, col = divmod(slot, _SLOTS_PER_ROW)
    x1 = col * _SLOT + 4.0
    y1 = row * _SLOT + 4.0
    return (x1, y1, x1 + _SLOT - 8.0, y1 + _SLOT - 8.0)


def _jitter_box(box, rng, scale=2.0):
    # small corner jitter keeps IoU with the source box >= 0.8
    x1, y1, x2, y2 = box
    dx1, dy1, dx2, dy2 = rng.uniform(-scale, scale, size=4)
    return (x1 + dx1, y1 + dy1, x2 + dx2, y2 + dy2)


def generate_world(k_known, k_unknown, n_attributes, n_star, dim, sigma,
                   n_distractors, seed, out_dir, train_per_class=20,
                   test_per_class=40, objectness=1.0, nuisance=0.45,
                   weight_jitter=0.3) -> SyntheticWorld:
    """Build a synthetic embedding world and persist it as manifests.

    Class embeddings are noisy sparse combinations of orthonormal attribute
    basis rows plus a shared `objectness` component along the basis mean;
    known classes get disjoint supports, each unknown class draws its support
    from the attributes of >= 2 distinct known classes, and distractors lie
    (almost) outside the attribute span. The shared component keeps every
    in-span object weakly activating every attribute, which is what makes
    sparse positive weights dominate cross-class negative ones. Attributes in
    no class's support carry per-sample `nuisance` jitter: irrelevant but
    noisy, they are what attribute selection exists to discard.
    """
    if n_star > n_attributes:
        raise BenchError("n_star cannot exceed the number of attributes")
    if dim < n_attributes:
        raise BenchError("embedding dim must be >= number of attributes")
    if k_known * n_star > n_attributes:
        raise BenchError("not enough attributes for disjoint known supports")
    if k_known < 2 or k_unknown < 1:
        raise BenchError("need >= 2 known and >= 1 unknown classes")

    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)

    # orthonormal attribute basis
    gauss = rng.normal(size=(dim, n_attributes))
    q, _ = np.linalg.qr(gauss)
    basis = q.T[:n_attributes]

    k_all = k_known + k_unknown
    perm = rng.permutation(n_attributes)
    supports: list[list[int]] = [
        sorted(perm[c * n_star:(c + 1) * n_star].tolist()) for c in range(k_known)
    ]
    known_support_owner = {}
    for c, sup in enumerate(supports):
        for j in sup:
            known_support_owner[j] = c
    known_pool = sorted(known_support_owner)
    min_donors = min(2, k_known, n_star)
    for _ in range(k_unknown):
        for attempt in range(10_000):
            attrs = sorted(rng.choice(known_pool, size=n_star, replace=False).tolist())
            donors = {known_support_owner[j] for j in attrs}
            if len(donors) >= min_donors and attrs not in supports:
                supports.append(attrs)
                break
        else:
            raise BenchError("cannot place distinct unknown supports; dims too tight")

    w_star = np.zeros((k_all, n_attributes))
    for c, sup in enumerate(supports):
        w_star[c, sup] = 1.0
    shared = basis.sum(axis=0) / np.sqrt(n_attributes)
    class_dirs = np.stack(
        [_unit(w_star[c] @ basis + objectness * shared) for c in range(k_all)])

    known = [f"known_{i}" for i in range(k_known)]
    unknown = [f"unknown_{i}" for i in range(k_unknown)]
    class_names = known + unknown

    planted = set(j for sup in supports for j in sup)
    irrelevant = sorted(set(range(n_attributes)) - planted)

    def sample_object(c):
        # per-sample spread along the class's own attribute simplex: objects
        # vary in how strongly each of their attributes expresses
        sup = supports[c]
        w = np.maximum(w_star[c, sup] + weight_jitter * rng.normal(size=len(sup)), 0.1)
        v = w @ basis[sup] + objectness * shared + sigma * rng.normal(size=dim)
        if irrelevant:
            v = v + rng.normal(scale=nuisance, size=len(irrelevant)) @ basis[irrelevant]
        return _unit(v)

    def make_train_images(prefix, classes):
        images = []
        for counter_base, c in enumerate(classes):
            for i in range(train_per_class):
                image_id = f"{prefix}_{counter_base * train_per_class + i:04d}"
                box = _slot_box(0)
                emb = np.stack([sample_object(c), sample_object(c)])
                boxes = np.stack([np.array(box), np.array(_jitter_box(box, rng))])
                prop_rel = f"tensors/{image_id}_prop.fomo"
                box_rel = f"tensors/{image_id}_box.fomo"
                write_tensor(out_dir / prop_rel, emb.astype(np.float32))
                write_tensor(out_dir / box_rel, boxes.astype(np.float32))
                images.append(ImageRecord(
                    image_id, prop_rel, box_rel,
                    [AnnotationRecord(image_id, box, c)]))
        return images

    # task-1 train split sees known classes only; the task-2 split reveals all
    train_images = make_train_images("train", range(k_known))
    train_t2_images = make_train_images("train2", range(k_all))

    # test split: known + unknown objects on disjoint slots, distractor
    # proposals with no ground truth filling the remaining slots
    objects = [(c, sample_object(c))
               for c in range(k_all) for _ in range(test_per_class)]
    rng.shuffle(objects)
    distractors = [_make_distractor(rng, basis) for _ in range(n_distractors)]

    test_images: list[ImageRecord] = []
    img_counter = 0
    obj_pos, dis_pos = 0, 0
    while obj_pos < len(objects) or dis_pos < len(distractors):
        image_id = f"test_{img_counter:04d}"
        img_counter += 1
        emb_rows, box_rows, anns = [], [], []
        n_obj_here = min(4, len(objects) - obj_pos)
        for slot in range(n_obj_here):
            c, emb = objects[obj_pos]
            obj_pos += 1
            box = _slot_box(slot)
            emb_rows.append(emb)
            box_rows.append(np.array(box))
            anns.append(AnnotationRecord(image_id, box, c))
        for slot in range(n_obj_here, _SLOTS_PER_IMAGE):
            if dis_pos >= len(distractors):
                break
            emb_rows.append(distractors[dis_pos])
            box_rows.append(np.array(_slot_box(slot)))
            dis_pos += 1
        if not emb_rows:
            break
        prop_rel = f"tensors/{image_id}_prop.fomo"
        box_rel = f"tensors/{image_id}_box.fomo"
        write_tensor(out_dir / prop_rel, np.stack(emb_rows).astype(np.float32))
        write_tensor(out_dir / box_rel, np.stack(box_rows).astype(np.float32))
        test_images.append(ImageRecord(image_id, prop_rel, box_rel, anns))

    # attribute catalog: basis rows are the attribute embeddings
    catalog = AttributeCatalog(
        [AttributeEntry(f"attr {i:02d}", "shape", "") for i in range(n_attributes)],
        embeddings=basis.astype(np.float32))
    save_catalog(catalog, out_dir / "attributes.json", tensor_name="attributes.fomo")

    train_manifest = Manifest(embedding_dim=dim, class_names=class_names,
                              images=train_images, attribute_file="attributes.json",
                              root=out_dir)
    train_t2_manifest = Manifest(embedding_dim=dim, class_names=class_names,
                                 images=train_t2_images,
                                 attribute_file="attributes.json", root=out_dir)
    test_manifest = Manifest(embedding_dim=dim, class_names=class_names,
                             images=test_images, attribute_file="attributes.json",
                             root=out_dir)
    save_manifest(train_manifest, out_dir / "train_manifest.json")
    save_manifest(train_t2_manifest, out_dir / "train_t2_manifest.json")
    save_manifest(test_manifest, out_dir / "test_manifest.json")

    # name bank (class directions stand in for name text embeddings) and a
    # generic-object direction for the baseline scorers
    save_text_bank(class_names, class_dirs.astype(np.float32),
                   out_dir / "class_text.json", tensor_name="class_text.fomo")
    save_text_bank(["object"], _unit(shared)[None, :].astype(np.float32),
                   out_dir / "generic.json", tensor_name="generic.fomo")

    plan = SplitPlan(dataset_name="synthetic", class_names=class_names,
                     instance_counts=[train_per_class] * k_known + [0] * k_unknown,
                     t1_known=known, t1_unknown=unknown)
    save_split(plan, out_dir / "split.json")

    world = SyntheticWorld(basis=basis, w_star=w_star, supports=supports,
                           class_names=class_names, known=known, unknown=unknown,
                           sigma=sigma, seed=seed, class_directions=class_dirs)
    sidecar = {
        "class_names": class_names,
        "known": known,
        "unknown": unknown,
        "supports": supports,
        "sigma": sigma,
        "seed": seed,
        "w_star": w_star.tolist(),
    }
    (out_dir / "world.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return world
