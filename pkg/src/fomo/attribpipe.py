"""Learning stages over a fixed attribute catalog: sparse selection of the
class-from-attribute weights, modality-gap adaptation of the attribute
embeddings, and BCE refinement of those embeddings with the weights frozen."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embedspace import AttributeEntry, batched_attribute_scores
from .owdeval import iou
from .tensorio import read_tensor, write_tensor


class TrainingError(Exception):
    pass


class ExemplarError(Exception):
    pass


@dataclass
class TrainConfig:
    seed: int
    learning_rate: float = 0.1
    epochs: int = 1000
    l1_weight: float = 1e-3
    n_hat: int = 25
    tol: float = 1e-10

    def __post_init__(self):
        problems = []
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs <= 0:
            problems.append(f"epochs must be positive, got {self.epochs}")
        if self.l1_weight < 0:
            problems.append(f"l1_weight must be >= 0, got {self.l1_weight}")
        if self.n_hat <= 0:
            problems.append(f"n_hat must be positive, got {self.n_hat}")
        if self.tol <= 0:
            problems.append(f"tol must be positive, got {self.tol}")
        if not isinstance(self.seed, int):
            problems.append(f"seed must be an integer, got {self.seed!r}")
        if problems:
            raise TrainingError("; ".join(problems))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_from_logits(z, y):
    """Numerically stable mean-over-samples, sum-over-classes BCE."""
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.sum(axis=1).mean())


def class_logits(w, s) -> np.ndarray:
    return np.asarray(w, dtype=np.float64) @ np.asarray(s, dtype=np.float64)


def selection_loss(w, scores, labels, l1_weight) -> float:
    """Mean BCE of sigmoid(W s) against multi-hot labels plus l1 * ||W||_1."""
    w = np.asarray(w, dtype=np.float64)
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    z = scores @ w.T
    return _bce_from_logits(z, labels) + l1_weight * float(np.abs(w).sum())


def selection_grad(w, scores, labels, l1_weight) -> np.ndarray:
    """Exact BCE gradient plus l1 * sign(W) subgradient (sign(0) = 0)."""
    w = np.asarray(w, dtype=np.float64)
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    z = scores @ w.T
    g = (_sigmoid(z) - labels).T @ scores / scores.shape[0]
    return g + l1_weight * np.sign(w)


@dataclass
class ExemplarSet:
    """Few-shot visual embeddings per class plus the derived class means."""

    class_names: list[str]
    embeddings: list[np.ndarray]  # one (n_i x D) array per class

    def __post_init__(self):
        if len(self.class_names) != len(self.embeddings):
            raise ExemplarError("one embedding block per class required")
        for name, block in zip(self.class_names, self.embeddings):
            if block.ndim != 2 or block.shape[0] < 1:
                raise ExemplarError(f"class {name!r} needs at least one exemplar")

    @property
    def class_means(self) -> np.ndarray:
        return np.stack([block.mean(axis=0) for block in self.embeddings])

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All exemplars (B x D) and their one-hot labels (B x K), class order."""
        xs = np.concatenate(self.embeddings, axis=0)
        labels = np.zeros((xs.shape[0], len(self.class_names)))
        row = 0
        for k, block in enumerate(self.embeddings):
            labels[row:row + block.shape[0], k] = 1.0
            row += block.shape[0]
        return xs, labels


@dataclass
class SelectionModel:
    w: np.ndarray  # K x N over the full catalog
    kept: list[int]
    selected_per_class: list[list[int]]
    n_hat: int
    class_names: list[str]

    def kept_weights(self) -> np.ndarray:
        return self.w[:, self.kept]


def select_attributes(e_att, exemplars: ExemplarSet, cfg: TrainConfig) -> SelectionModel:
    """Optimize W by seeded full-batch gradient descent, then prune to the
    per-class top-n_hat attributes by |W| and drop attributes no class uses."""
    e_att = np.asarray(e_att, dtype=np.float64)
    n_attr = e_att.shape[0]
    xs, labels = exemplars.stacked()
    scores = batched_attribute_scores(xs, e_att)
    k = len(exemplars.class_names)

    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(n_attr)
    w = rng.uniform(-bound, bound, size=(k, n_attr))

    initial = selection_loss(w, scores, labels, cfg.l1_weight)
    prev = initial
    for epoch in range(cfg.epochs):
        w = w - cfg.learning_rate * selection_grad(w, scores, labels, cfg.l1_weight)
        loss = selection_loss(w, scores, labels, cfg.l1_weight)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite selection loss at epoch {epoch}")
        if abs(prev - loss) < cfg.tol:
            break
        prev = loss
    final = selection_loss(w, scores, labels, cfg.l1_weight)
    if final > initial:
        raise TrainingError(
            f"selection diverged: loss {initial:.6g} -> {final:.6g}; lower the learning rate")

    budget = min(cfg.n_hat, n_attr)
    selected_per_class = []
    for c in range(k):
        order = sorted(range(n_attr), key=lambda j: (-abs(w[c, j]), j))
        selected_per_class.append(sorted(order[:budget]))
    kept = sorted(set(j for sel in selected_per_class for j in sel))
    return SelectionModel(w=w, kept=kept, selected_per_class=selected_per_class,
                          n_hat=cfg.n_hat, class_names=list(exemplars.class_names))


def adapt_attributes(e_att, w, e_cls_v, steps=500, lr=None) -> np.ndarray:
    """Gradient descent on ||W E - E_cls||_F^2 over E with W frozen."""
    e = np.array(e_att, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(e_cls_v, dtype=np.float64)
    if lr is None:
        smax = np.linalg.norm(w, 2)
        lr = 1.0 / (2.0 * smax * smax) if smax > 0 else 1.0

    def objective(mat):
        r = w @ mat - y
        return float((r * r).sum())

    prev = objective(e)
    rising = 0
    for _ in range(steps):
        grad = 2.0 * w.T @ (w @ e - y)
        e = e - lr * grad
        obj = objective(e)
        if not np.isfinite(obj):
            raise TrainingError("adaptation objective became non-finite; lower the learning rate")
        if obj > prev:
            rising += 1
            if rising >= 10:
                raise TrainingError(
                    "adaptation objective rose 10 consecutive steps; lower the learning rate")
        else:
            rising = 0
        prev = obj
    return e


def _refine_loss_and_grad(e_kept, w_kept, xs, labels):
    """BCE over exemplars through cosine scores; gradient w.r.t. kept rows."""
    xn = xs / np.linalg.norm(xs, axis=1, keepdims=True)
    en = np.linalg.norm(e_kept, axis=1)
    cos = xn @ e_kept.T / en[None, :]  # B x n
    z = cos @ w_kept.T
    loss = _bce_from_logits(z, labels)
    dz = (_sigmoid(z) - labels) / xs.shape[0]
    dcos = dz @ w_kept  # B x n
    grad = (dcos.T @ xn) / en[:, None] - ((dcos * cos).sum(axis=0) / en**2)[:, None] * e_kept
    return loss, grad


def refine_loss(e_att, w, exemplars: ExemplarSet, kept=None) -> float:
    e_att = np.asarray(e_att, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kept = list(range(e_att.shape[0])) if kept is None else list(kept)
    xs, labels = exemplars.stacked()
    loss, _ = _refine_loss_and_grad(e_att[kept], w[:, kept], xs, labels)
    return loss


def refine_grad(e_att, w, exemplars: ExemplarSet, kept=None) -> np.ndarray:
    """Gradient of the refinement BCE w.r.t. E_att; zero on unkept rows."""
    e_att = np.asarray(e_att, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kept = list(range(e_att.shape[0])) if kept is None else list(kept)
    xs, labels = exemplars.stacked()
    _, g_kept = _refine_loss_and_grad(e_att[kept], w[:, kept], xs, labels)
    grad = np.zeros_like(e_att)
    grad[kept] = g_kept
    return grad


def refine_attributes(e_att, w, exemplars: ExemplarSet, cfg: TrainConfig,
                      kept=None) -> np.ndarray:
    """Gradient descent on the exemplar BCE over kept E_att rows, W frozen."""
    e = np.array(e_att, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kept = list(range(e.shape[0])) if kept is None else list(kept)
    xs, labels = exemplars.stacked()
    w_kept = w[:, kept]

    initial, _ = _refine_loss_and_grad(e[kept], w_kept, xs, labels)
    prev = initial
    for epoch in range(cfg.epochs):
        loss, grad = _refine_loss_and_grad(e[kept], w_kept, xs, labels)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite refinement loss at epoch {epoch}")
        e[kept] = e[kept] - cfg.learning_rate * grad
        if abs(prev - loss) < cfg.tol:
            break
        prev = loss
    final, _ = _refine_loss_and_grad(e[kept], w_kept, xs, labels)
    if final > initial:
        raise TrainingError(
            f"refinement diverged: loss {initial:.6g} -> {final:.6g}; lower the learning rate")
    return e


def build_exemplar_set(manifest, n_shots, mode="fomo", seed=0,
                       class_names=None) -> ExemplarSet:
    """Turn ground-truth boxes plus proposal embeddings into few-shot exemplars.

    For each sampled GT box, proposals with IoU >= 0.8 against it are kept;
    mode='fomo' takes the kept embedding farthest (Euclidean) from the kept
    mean (ties to the lower proposal index), mode='average' takes the mean of
    the kept embeddings. min(n_shots, available) exemplars per class.
    """
    if mode not in ("fomo", "average"):
        raise ExemplarError(f"mode must be 'fomo' or 'average', got {mode!r}")
    if n_shots < 1:
        raise ExemplarError(f"n_shots must be >= 1, got {n_shots}")

    if class_names is None:
        present = set()
        for rec in manifest.images:
            for ann in rec.annotations:
                present.add(ann.class_index)
        class_names = [manifest.class_names[i] for i in sorted(present)]
    name_to_idx = {n: i for i, n in enumerate(manifest.class_names)}
    for name in class_names:
        if name not in name_to_idx:
            raise ExemplarError(f"class {name!r} not in manifest")

    # candidate embeddings per class, in manifest order
    candidates: dict[str, list[np.ndarray]] = {name: [] for name in class_names}
    wanted = {name_to_idx[n]: n for n in class_names}
    for rec in manifest.images:
        relevant = [a for a in rec.annotations if a.class_index in wanted]
        if not relevant:
            continue
        emb, boxes = manifest.load_proposals(rec)
        for ann in relevant:
            kept_rows = [p for p in range(boxes.shape[0])
                         if iou(boxes[p], ann.box) >= 0.8]
            if not kept_rows:
                continue
            block = emb[kept_rows].astype(np.float64)
            if mode == "average":
                chosen = block.mean(axis=0)
            else:
                center = block.mean(axis=0)
                dists = np.linalg.norm(block - center, axis=1)
                chosen = block[int(np.argmax(dists))]  # argmax ties -> first
            candidates[wanted[ann.class_index]].append(chosen)

    class_blocks = []
    for pos, name in enumerate(class_names):
        pool = candidates[name]
        if not pool:
            raise ExemplarError(f"class {name!r} has no exemplars surviving the IoU filter")
        take = min(n_shots, len(pool))
        rng = np.random.default_rng([seed, pos])
        picked = sorted(rng.choice(len(pool), size=take, replace=False).tolist())
        class_blocks.append(np.stack([pool[i] for i in picked]))
    return ExemplarSet(class_names=list(class_names), embeddings=class_blocks)


# --- model persistence -------------------------------------------------------

WEIGHTS_FILE = "weights.fomo"
ATTRIBUTES_FILE = "attributes.fomo"
MODEL_FILE = "model.json"


def save_model(model_dir, model: SelectionModel, e_att, entries, cfg: TrainConfig,
               stages) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(model_dir / WEIGHTS_FILE, np.asarray(model.w, dtype=np.float32))
    write_tensor(model_dir / ATTRIBUTES_FILE, np.asarray(e_att, dtype=np.float32))
    doc = {
        "class_names": model.class_names,
        "kept": model.kept,
        "selected_per_class": model.selected_per_class,
        "n_hat": model.n_hat,
        "config": asdict(cfg),
        "stages": list(stages),
        "attribute_entries": [
            {"text": e.text, "category": e.category, "source_class": e.source_class}
            for e in entries
        ],
    }
    (model_dir / MODEL_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(model_dir):
    """Returns (SelectionModel, e_att, entries, cfg, stages)."""
    model_dir = Path(model_dir)
    doc = json.loads((model_dir / MODEL_FILE).read_text())
    w = read_tensor(model_dir / WEIGHTS_FILE)
    e_att = read_tensor(model_dir / ATTRIBUTES_FILE)
    model = SelectionModel(
        w=np.asarray(w, dtype=np.float64),
        kept=list(doc["kept"]),
        selected_per_class=[list(s) for s in doc["selected_per_class"]],
        n_hat=doc["n_hat"],
        class_names=list(doc["class_names"]),
    )
    entries = [
        AttributeEntry(rec["text"], rec["category"], rec.get("source_class", ""))
        for rec in doc["attribute_entries"]
    ]
    cfg = TrainConfig(**doc["config"])
    return model, np.asarray(e_att, dtype=np.float64), entries, cfg, doc["stages"]
