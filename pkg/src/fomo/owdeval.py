"""Open-world detection metrics: greedy matching, AP@0.5, mAP partitions,
unknown recall/mAP, wilderness impact, and absolute open-set error."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EvalError(Exception):
    pass


def iou(box_a, box_b) -> float:
    """Intersection over union of two corner boxes; 0 when disjoint."""
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        raise EvalError(f"degenerate box: {box_a if area_a <= 0 else box_b}")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def match_detections(det_boxes, gt_boxes, iou_thresh=0.5):
    """Greedy single-match in score order for one image and one class.

    det_boxes must already be sorted by descending score. A detection is a
    TP iff its best-IoU *unmatched* GT reaches the threshold; that GT is
    then consumed. Returns (tp flags, fp flags, gt matched flags).
    """
    n_det = len(det_boxes)
    n_gt = len(gt_boxes)
    tp = np.zeros(n_det, dtype=bool)
    gt_matched = np.zeros(n_gt, dtype=bool)
    for d in range(n_det):
        best_iou = 0.0
        best_g = -1
        for g in range(n_gt):
            if gt_matched[g]:
                continue
            ov = iou(det_boxes[d], gt_boxes[g])
            if ov > best_iou:
                best_iou = ov
                best_g = g
        if best_g >= 0 and best_iou >= iou_thresh:
            tp[d] = True
            gt_matched[best_g] = True
    return tp, ~tp, gt_matched


def average_precision(tp, fp, n_gt) -> float:
    """All-point interpolated AP from TP/FP flags sorted by descending score."""
    if n_gt <= 0:
        raise EvalError("average_precision needs at least one ground-truth box")
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # precision envelope over recall, integrated at recall change points
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class TaskSpec:
    """Class roles for one evaluation stage.

    T1: known_classes + unknown_classes (unknown GT merges into class 0).
    T2: prev_known + curr_known; detection classes are indexed 1..K over
    prev_known followed by curr_known.
    """

    stage: str
    known_classes: list[str] = field(default_factory=list)
    unknown_classes: list[str] = field(default_factory=list)
    prev_known: list[str] = field(default_factory=list)
    curr_known: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in ("t1", "t2"):
            raise EvalError(f"stage must be 't1' or 't2', got {self.stage!r}")
        if self.stage == "t1":
            if not self.known_classes:
                raise EvalError("t1 needs known_classes")
            overlap = set(self.known_classes) & set(self.unknown_classes)
        else:
            if not self.prev_known or not self.curr_known:
                raise EvalError("t2 needs prev_known and curr_known")
            overlap = set(self.prev_known) & set(self.curr_known)
        if overlap:
            raise EvalError(f"class sets overlap: {sorted(overlap)}")

    @property
    def stage_classes(self) -> list[str]:
        """Detection classes in index order (class_index = 1 + position)."""
        if self.stage == "t1":
            return list(self.known_classes)
        return list(self.prev_known) + list(self.curr_known)


@dataclass
class EvalReport:
    stage: str
    per_class_ap: dict
    k_map: float | None = None
    pk_map: float | None = None
    ck_map: float | None = None
    both_map: float | None = None
    u_map: float | None = None
    u_recall: float | None = None
    wi: float | None = None
    a_ose: int | None = None
    zero_gt_classes: list = field(default_factory=list)


def _gt_by_image(manifest, class_names_to_idx):
    """image_id -> list of (class_name, box) limited to classes of interest."""
    out = {}
    for rec in manifest.images:
        rows = []
        for ann in rec.annotations:
            name = manifest.class_names[ann.class_index]
            if name in class_names_to_idx:
                rows.append((name, ann.box))
        out[rec.image_id] = rows
    return out


def _sorted_dets(dets):
    # stable: descending score, then original order within the image
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order]


def _class_ap(dets_by_image, gt_by_image, class_name, image_ids, iou_thresh):
    """Pool one class's matches across images; returns (flags sorted by score, n_gt)."""
    scored = []  # (score, image order, det order, tp)
    n_gt = 0
    for img_pos, image_id in enumerate(image_ids):
        gts = [box for (name, box) in gt_by_image.get(image_id, []) if name == class_name]
        n_gt += len(gts)
        dets = [d for d in dets_by_image.get(image_id, []) if d.class_name == class_name]
        dets = _sorted_dets(dets)
        tp, _, _ = match_detections([d.box for d in dets], gts, iou_thresh)
        for j, d in enumerate(dets):
            scored.append((-d.score, img_pos, j, bool(tp[j])))
    scored.sort()
    tp_flags = np.array([s[3] for s in scored], dtype=bool)
    return tp_flags, n_gt


class _EvalDet:
    """Detection resolved to a class name ('<unknown>' for class 0)."""

    __slots__ = ("box", "class_name", "score")

    def __init__(self, box, class_name, score):
        self.box = box
        self.class_name = class_name
        self.score = score


UNKNOWN = "<unknown>"


def _resolve_detections(detection_sets, task: TaskSpec):
    stage_classes = task.stage_classes
    by_image = {}
    for ds in detection_sets:
        resolved = []
        for det in ds.detections:
            ci = det.class_index
            if ci == 0:
                if task.stage == "t2":
                    continue  # everything is revealed in t2; class 0 scores nothing
                name = UNKNOWN
            elif 1 <= ci <= len(stage_classes):
                name = stage_classes[ci - 1]
            else:
                raise EvalError(
                    f"detection class_index {ci} outside stage with {len(stage_classes)} classes"
                )
            resolved.append(_EvalDet(det.box, name, det.score))
        by_image.setdefault(ds.image_id, []).extend(resolved)
    return by_image


def _mean(values):
    return float(np.mean(values)) if values else None


def evaluate_task(detection_sets, manifest, task: TaskSpec, iou_thresh=0.5,
                  recall_level=None) -> EvalReport:
    """Score a detection run against manifest ground truth for one task stage."""
    stage_classes = task.stage_classes
    known_set = set(stage_classes)
    missing = known_set - set(manifest.class_names)
    if missing:
        raise EvalError(f"task classes not in manifest: {sorted(missing)}")
    if task.stage == "t1":
        interest = known_set | set(task.unknown_classes)
    else:
        interest = set(manifest.class_names)
        uncovered = interest - known_set
        if uncovered:
            raise EvalError(f"t2 prev+curr must cover all classes; missing {sorted(uncovered)}")
    name_idx = {n: i for i, n in enumerate(manifest.class_names) if n in interest}

    dets_by_image = _resolve_detections(detection_sets, task)
    gt_by_image = _gt_by_image(manifest, name_idx)
    image_ids = [rec.image_id for rec in manifest.images]

    per_class_ap = {}
    zero_gt = []
    for cls in stage_classes:
        tp_flags, n_gt = _class_ap(dets_by_image, gt_by_image, cls, image_ids, iou_thresh)
        if n_gt == 0:
            zero_gt.append(cls)
            per_class_ap[cls] = None
            continue
        per_class_ap[cls] = average_precision(tp_flags, ~tp_flags, n_gt)

    report = EvalReport(stage=task.stage, per_class_ap=per_class_ap,
                        zero_gt_classes=zero_gt)

    if task.stage == "t1":
        report.k_map = _mean([ap for ap in per_class_ap.values() if ap is not None])
        # merge every held-out class into one unknown class
        unknown_set = set(task.unknown_classes)
        scored = []
        total_unknown_gt = 0
        matched_unknown_gt = 0
        for img_pos, image_id in enumerate(image_ids):
            gts = [box for (name, box) in gt_by_image.get(image_id, [])
                   if name in unknown_set]
            total_unknown_gt += len(gts)
            dets = [d for d in dets_by_image.get(image_id, []) if d.class_name == UNKNOWN]
            dets = _sorted_dets(dets)
            tp, _, gt_matched = match_detections([d.box for d in dets], gts, iou_thresh)
            matched_unknown_gt += int(np.count_nonzero(gt_matched))
            for j, d in enumerate(dets):
                scored.append((-d.score, img_pos, j, bool(tp[j])))
        scored.sort()
        if total_unknown_gt > 0:
            tp_flags = np.array([s[3] for s in scored], dtype=bool)
            report.u_map = average_precision(tp_flags, ~tp_flags, total_unknown_gt)
            report.u_recall = matched_unknown_gt / total_unknown_gt
        report.a_ose = absolute_open_set_error(
            detection_sets, manifest, task, iou_thresh=iou_thresh)
        try:
            report.wi = wilderness_impact(
                detection_sets, manifest, task, iou_thresh=iou_thresh,
                recall_level=recall_level)
        except EvalError:
            report.wi = None
    else:
        prev = [per_class_ap[c] for c in task.prev_known if per_class_ap[c] is not None]
        curr = [per_class_ap[c] for c in task.curr_known if per_class_ap[c] is not None]
        both = [ap for ap in per_class_ap.values() if ap is not None]
        report.pk_map = _mean(prev)
        report.ck_map = _mean(curr)
        report.both_map = _mean(both)
    return report


def _known_det_roles(detection_sets, manifest, task, iou_thresh):
    """Classify each known-labeled detection as TP, unknown-hit, or plain FP.

    Returns rows (sort key, role) with role in {'tp', 'unk', 'fp'}, sorted by
    descending score. Unknown-hit determination uses class-agnostic greedy
    single-match of the non-TP detections onto unknown GT.
    """
    dets_by_image = _resolve_detections(detection_sets, task)
    unknown_set = set(task.unknown_classes)
    name_idx = {n: i for i, n in enumerate(manifest.class_names)}
    rows = []
    for img_pos, rec in enumerate(manifest.images):
        dets = dets_by_image.get(rec.image_id, [])
        known_dets = [d for d in dets if d.class_name != UNKNOWN]
        known_dets = _sorted_dets(known_dets)
        # per-class TP marking against known GT
        tp_mark = [False] * len(known_dets)
        for cls in set(d.class_name for d in known_dets):
            gts = [a.box for a in rec.annotations
                   if manifest.class_names[a.class_index] == cls]
            idxs = [i for i, d in enumerate(known_dets) if d.class_name == cls]
            tp, _, _ = match_detections([known_dets[i].box for i in idxs], gts, iou_thresh)
            for local, i in enumerate(idxs):
                tp_mark[i] = bool(tp[local])
        # remaining detections greedily consume unknown GT (one each)
        unk_boxes = [a.box for a in rec.annotations
                     if manifest.class_names[a.class_index] in unknown_set]
        unk_taken = [False] * len(unk_boxes)
        for i, d in enumerate(known_dets):
            role = "tp" if tp_mark[i] else "fp"
            if role == "fp":
                best, best_g = 0.0, -1
                for g, gb in enumerate(unk_boxes):
                    if unk_taken[g]:
                        continue
                    ov = iou(d.box, gb)
                    if ov > best:
                        best, best_g = ov, g
                if best_g >= 0 and best >= iou_thresh:
                    unk_taken[best_g] = True
                    role = "unk"
            rows.append(((-d.score, img_pos, i), role))
    rows.sort(key=lambda r: r[0])
    return rows


def absolute_open_set_error(detection_sets, manifest, task: TaskSpec,
                            iou_thresh=0.5) -> int:
    """Count known-labeled detections landing on unknown GT (greedy single-match)."""
    rows = _known_det_roles(detection_sets, manifest, task, iou_thresh)
    return sum(1 for _, role in rows if role == "unk")


def wilderness_impact(detection_sets, manifest, task: TaskSpec, iou_thresh=0.5,
                      recall_level=None) -> float:
    """P_K / P_{K u U} - 1 for known-labeled detections.

    P_K ignores detections that match unknown GT; P_{K u U} counts them as
    false positives. With recall_level set, both precisions are taken at the
    first rank where known recall reaches that level; otherwise over the
    full ranked list.
    """
    rows = _known_det_roles(detection_sets, manifest, task, iou_thresh)
    if not rows:
        raise EvalError("wilderness impact needs at least one known-labeled detection")
    roles = [role for _, role in rows]
    if recall_level is not None:
        known_set = set(task.stage_classes)
        n_known_gt = sum(
            1 for rec in manifest.images for a in rec.annotations
            if manifest.class_names[a.class_index] in known_set)
        if n_known_gt == 0:
            raise EvalError("wilderness impact needs known ground truth")
        tp_run = 0
        cut = len(roles)
        for i, role in enumerate(roles):
            tp_run += role == "tp"
            if tp_run / n_known_gt >= recall_level:
                cut = i + 1
                break
        roles = roles[:cut]
    tp = sum(1 for r in roles if r == "tp")
    fp = sum(1 for r in roles if r == "fp")
    unk = sum(1 for r in roles if r == "unk")
    if tp + fp == 0 or tp == 0:
        raise EvalError("wilderness impact undefined without known true positives")
    p_known = tp / (tp + fp)
    p_open = tp / (tp + fp + unk)
    return p_known / p_open - 1.0


def report_to_dict(report: EvalReport) -> dict:
    """JSON form; mAP-family values reported x100."""
    def pct(v):
        return None if v is None else round(v * 100.0, 6)

    doc = {
        "stage": report.stage,
        "per_class_ap": {k: pct(v) for k, v in report.per_class_ap.items()},
        "zero_gt_classes": list(report.zero_gt_classes),
    }
    if report.stage == "t1":
        doc.update({
            "k_map": pct(report.k_map),
            "u_map": pct(report.u_map),
            "u_recall": pct(report.u_recall),
            "wi": None if report.wi is None else round(report.wi, 6),
            "a_ose": report.a_ose,
        })
    else:
        doc.update({
            "pk_map": pct(report.pk_map),
            "ck_map": pct(report.ck_map),
            "both_map": pct(report.both_map),
        })
    return doc


def render_table(report: EvalReport) -> str:
    """Aligned plain-text table mirroring the task-1/task-2 column layout."""
    def cell(v):
        return "-" if v is None else f"{v * 100.0:.1f}"

    lines = []
    if report.stage == "t1":
        lines.append(f"{'Task 1':<12}{'U':>8}{'K':>8}{'U-Recall':>10}{'WI':>10}{'A-OSE':>8}")
        wi = "-" if report.wi is None else f"{report.wi:.4f}"
        aose = "-" if report.a_ose is None else str(report.a_ose)
        lines.append(
            f"{'overall':<12}{cell(report.u_map):>8}{cell(report.k_map):>8}"
            f"{cell(report.u_recall):>10}{wi:>10}{aose:>8}"
        )
    else:
        lines.append(f"{'Task 2':<12}{'PK':>8}{'CK':>8}{'Both':>8}")
        lines.append(
            f"{'overall':<12}{cell(report.pk_map):>8}{cell(report.ck_map):>8}"
            f"{cell(report.both_map):>8}"
        )
    lines.append("")
    lines.append(f"{'class':<28}{'AP':>8}")
    for cls, ap in report.per_class_ap.items():
        lines.append(f"{cls:<28}{cell(ap):>8}")
    if report.zero_gt_classes:
        lines.append("")
        lines.append("excluded (no ground truth): " + ", ".join(report.zero_gt_classes))
    return "\n".join(lines) + "\n"


def save_report(report: EvalReport, json_path, table_path=None) -> None:
    Path(json_path).write_text(
        json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    if table_path is not None:
        Path(table_path).write_text(render_table(report))
