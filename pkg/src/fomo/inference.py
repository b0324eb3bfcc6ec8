"""Per-proposal scoring and detection assembly: known-class probabilities,
the unknown score p_ood * p_id, the five baseline scorers, and capped
per-image detection sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedspace import batched_attribute_scores, cosine_sim, normalize_attribute_text
from .tensorio import read_tensor, write_tensor

SCORER_KINDS = ("fomo", "base_generic", "imagenet_names", "llm_names", "gt_names",
                "few_shot")

DEFAULT_CAP = 100


class InferenceError(Exception):
    pass


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def p_ood(logits) -> float:
    """1 - max softmax over known-class logits; in [0, 1 - 1/K]."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size < 1:
        raise InferenceError("p_ood needs at least one class logit")
    return float(1.0 - _softmax(logits).max())


def p_id(scores) -> float:
    """Max sigmoid over (kept) attribute scores; in (0, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise InferenceError("p_id needs at least one attribute score")
    return float(_sigmoid(scores).max())


def unknown_score(logits, scores) -> float:
    return p_ood(logits) * p_id(scores)


@dataclass
class ScorerSpec:
    """Inputs for one scorer kind; validate() checks the kind's requirements.

    class_embeddings: K x D rows aligned with class_names (text embeddings
    for the text-conditioned kinds, per-class exemplar means for few_shot).
    generic_embedding: the generic-object prompt row (base_generic/few_shot).
    proposal_names/proposal_embeddings: candidate unknown-name bank for the
    imagenet/llm/gt kinds; known class names are filtered out before use.
    """

    kind: str
    class_names: list[str] = field(default_factory=list)
    class_embeddings: np.ndarray | None = None
    generic_embedding: np.ndarray | None = None
    proposal_names: list[str] = field(default_factory=list)
    proposal_embeddings: np.ndarray | None = None
    selection_model: object = None
    attribute_embeddings: np.ndarray | None = None

    def validate(self) -> None:
        if self.kind not in SCORER_KINDS:
            raise InferenceError(f"unknown scorer kind {self.kind!r}")
        if self.kind == "fomo":
            if self.selection_model is None or self.attribute_embeddings is None:
                raise InferenceError("fomo scorer needs a selection model and attributes")
            return
        if self.class_embeddings is None or not self.class_names:
            raise InferenceError(f"{self.kind} scorer needs class names and embeddings")
        if self.kind in ("base_generic", "few_shot"):
            if self.generic_embedding is None:
                raise InferenceError(f"{self.kind} scorer needs a generic prompt embedding")
        else:
            if self.proposal_embeddings is None or not self.proposal_names:
                raise InferenceError(f"{self.kind} scorer needs an unknown-name bank")

    def filtered_proposal_rows(self) -> np.ndarray:
        """Name-bank rows with known class names removed; error when empty."""
        known = {normalize_attribute_text(n) for n in self.class_names}
        rows = [i for i, name in enumerate(self.proposal_names)
                if normalize_attribute_text(name) not in known]
        if not rows:
            raise InferenceError("no proposal names left after filtering known classes")
        return np.asarray(self.proposal_embeddings)[rows]


def fomo_scores(e_v, model, e_att):
    """(known probabilities, unknown score) for one visual embedding."""
    s_kept = batched_attribute_scores(e_v, np.asarray(e_att)[model.kept])[0]
    logits = model.kept_weights() @ s_kept
    return _sigmoid(logits), p_ood(logits) * p_id(s_kept)


def score_known(e_v, spec: ScorerSpec) -> np.ndarray:
    """Known-class probabilities for one proposal embedding."""
    spec.validate()
    if spec.kind == "fomo":
        probs, _ = fomo_scores(e_v, spec.selection_model, spec.attribute_embeddings)
        return probs
    sims = np.array([cosine_sim(e_v, row) for row in spec.class_embeddings])
    return _sigmoid(sims)


def score_unknown_baseline(e_v, spec: ScorerSpec) -> float:
    """Unknown score for the non-fomo scorer kinds."""
    spec.validate()
    if spec.kind == "fomo":
        raise InferenceError("fomo unknown scoring goes through fomo_scores")
    if spec.kind in ("base_generic", "few_shot"):
        return float(_sigmoid(np.array([cosine_sim(e_v, spec.generic_embedding)]))[0])
    rows = spec.filtered_proposal_rows()
    sims = np.array([cosine_sim(e_v, row) for row in rows])
    return float(_sigmoid(sims).max())


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_index: int  # 0 = unknown, 1..K = known classes in stage order
    score: float


@dataclass
class DetectionSet:
    image_id: str
    detections: list[Detection]


def assemble_detections(image_id, boxes, known_probs, unknown_scores, cap=DEFAULT_CAP,
                        policy="joint", split_sizes=(50, 50)) -> DetectionSet:
    """Rank (proposal, class) candidates into a capped per-image detection set.

    policy='joint': all known and unknown candidates compete for `cap` slots.
    policy='split': top split_sizes[0] known-labeled and top split_sizes[1]
    unknown-labeled detections are kept separately.
    Ties break by (proposal index, class index); output is sorted by
    descending score with the same tie rule.
    """
    if cap < 1:
        raise InferenceError(f"cap must be >= 1, got {cap}")
    if policy not in ("joint", "split"):
        raise InferenceError(f"policy must be 'joint' or 'split', got {policy!r}")
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    known_probs = np.atleast_2d(np.asarray(known_probs, dtype=np.float64))
    unknown_scores = np.asarray(unknown_scores, dtype=np.float64).reshape(-1)
    n_prop = boxes.shape[0]
    if known_probs.shape[0] != n_prop or unknown_scores.shape[0] != n_prop:
        raise InferenceError("per-proposal arrays disagree on proposal count")

    known_cands = [(-known_probs[p, c], p, c + 1)
                   for p in range(n_prop) for c in range(known_probs.shape[1])]
    unk_cands = [(-unknown_scores[p], p, 0) for p in range(n_prop)]
    if policy == "joint":
        ranked = sorted(known_cands + unk_cands)[:cap]
    else:
        k_known, k_unk = split_sizes
        ranked = sorted(sorted(known_cands)[:k_known] + sorted(unk_cands)[:k_unk])
    dets = [
        Detection(box=tuple(float(v) for v in boxes[p]), class_index=c, score=-neg)
        for neg, p, c in ranked
    ]
    return DetectionSet(image_id=image_id, detections=dets)


def save_detections(detection_sets, path) -> None:
    """JSON-lines, one detection per line, deterministic order."""
    with open(path, "w") as fh:
        for ds in detection_sets:
            for det in ds.detections:
                fh.write(json.dumps(
                    {"image_id": ds.image_id, "box": list(det.box),
                     "class_index": det.class_index, "score": det.score},
                    sort_keys=True) + "\n")


def load_detections(path) -> list[DetectionSet]:
    by_image: dict[str, list[Detection]] = {}
    order: list[str] = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        det = Detection(box=tuple(float(v) for v in rec["box"]),
                        class_index=int(rec["class_index"]), score=float(rec["score"]))
        if rec["image_id"] not in by_image:
            order.append(rec["image_id"])
            by_image[rec["image_id"]] = []
        by_image[rec["image_id"]].append(det)
    return [DetectionSet(image_id=i, detections=by_image[i]) for i in order]


def load_text_bank(path):
    """(names, embedding matrix) from a bank JSON + tensor pair."""
    path = Path(path)
    doc = json.loads(path.read_text())
    names = list(doc["names"])
    emb = read_tensor(path.parent / doc["embedding_tensor"])
    if np.atleast_2d(emb).shape[0] != len(names):
        raise InferenceError(f"{path}: bank has {len(names)} names but "
                             f"{np.atleast_2d(emb).shape[0]} embedding rows")
    return names, np.atleast_2d(np.asarray(emb, dtype=np.float64))


def save_text_bank(names, embeddings, path, tensor_name=None) -> None:
    path = Path(path)
    tensor_name = tensor_name or (path.stem + ".fomo")
    write_tensor(path.parent / tensor_name, np.asarray(embeddings, dtype=np.float32))
    path.write_text(json.dumps(
        {"names": list(names), "embedding_tensor": tensor_name},
        indent=2, sort_keys=True) + "\n")
