"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The synthetic end-to-end criteria share one world built through the
CLI at the pinned settings (seed 7)."""

import hashlib
import json
import time

import numpy as np
import pytest

from fomo import attribpipe, embedspace, inference, owdeval
from fomo.attribpipe import ExemplarSet, TrainConfig
from fomo.cli import main as cli_main
from fomo.inference import Detection, DetectionSet, assemble_detections
from fomo.owdeval import TaskSpec, evaluate_task
from fomo.tensorio import load_manifest

from .oracle_eval import oracle_evaluate, random_instance
from .test_owdeval import dets_from_rows, make_manifest

SEED = 7


def run_cli(args):
    assert cli_main([str(a) for a in args]) == 0


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """The pinned synthetic world plus full / no-selection / no-refinement
    pipeline runs, all through the CLI."""
    root = tmp_path_factory.mktemp("acceptance")
    world_dir = root / "world"
    t0 = time.monotonic()
    run_cli(["synth", "--out", world_dir, "--seed", SEED, "--k-known", 6,
             "--k-unknown", 3, "--n-attributes", 32, "--n-star", 2, "--dim", 64,
             "--sigma", 0.05, "--distractors", 200])

    def pipeline(tag, n_hat, refine=True):
        select_dir = root / f"{tag}_select"
        adapt_dir = root / f"{tag}_adapt"
        run_cli(["select", "--manifest", world_dir / "train_manifest.json",
                 "--split", world_dir / "split.json",
                 "--attributes", world_dir / "attributes.json",
                 "--out", select_dir, "--seed", SEED, "--n-hat", n_hat])
        run_cli(["adapt", "--manifest", world_dir / "train_manifest.json",
                 "--split", world_dir / "split.json", "--model", select_dir,
                 "--out", adapt_dir])
        model_dir = adapt_dir
        if refine:
            model_dir = root / f"{tag}_refine"
            run_cli(["refine", "--manifest", world_dir / "train_manifest.json",
                     "--split", world_dir / "split.json", "--model", adapt_dir,
                     "--out", model_dir])
        infer_dir = root / f"{tag}_infer"
        run_cli(["infer", "--manifest", world_dir / "test_manifest.json",
                 "--scorer", "fomo", "--model", model_dir, "--out", infer_dir])
        eval_dir = root / f"{tag}_eval"
        run_cli(["eval", "--detections", infer_dir / "detections.jsonl",
                 "--manifest", world_dir / "test_manifest.json",
                 "--split", world_dir / "split.json", "--stage", "t1",
                 "--out", eval_dir])
        return {"model": model_dir, "infer": infer_dir, "eval": eval_dir}

    runs = {
        "full": pipeline("full", n_hat=2),
        # selection disabled = the per-class budget stops binding (no pruning)
        "no_selection": pipeline("nosel", n_hat=32),
        "no_refinement": pipeline("noref", n_hat=2, refine=False),
    }
    elapsed = time.monotonic() - t0
    return {"root": root, "dir": world_dir, "runs": runs, "elapsed": elapsed}


def test_metric_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(20240)
    for _ in range(200):
        known, unknown, gt_rows, det_rows = random_instance(rng)
        names = known + unknown
        n_images = 1 + max([int(r[0][2:]) for r in gt_rows + det_rows] or [0])
        manifest = make_manifest(names, gt_rows, n_images)
        task = TaskSpec(stage="t1", known_classes=known, unknown_classes=unknown)
        report = evaluate_task(dets_from_rows(det_rows, known), manifest, task)
        per_class, mean_ap, u_ap, u_recall = oracle_evaluate(
            det_rows, gt_rows, known, unknown)
        for cls in known:
            if per_class[cls] is None:
                assert report.per_class_ap[cls] is None
            else:
                assert abs(report.per_class_ap[cls] - per_class[cls]) < 1e-9
        if mean_ap is None:
            assert report.k_map is None
        else:
            assert abs(report.k_map - mean_ap) < 1e-9
        if u_ap is not None:
            assert abs(report.u_map - u_ap) < 1e-9
            assert abs(report.u_recall - u_recall) < 1e-9
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    print(f"\nACCEPTANCE metric-oracle-equivalence: PASS "
          f"(200 instances, max err < 1e-9, {elapsed:.1f}s)")


def test_hand_computed_metric_cases():
    # the three average-precision cases
    assert owdeval.average_precision([True], [False], 1) == 1.0
    assert owdeval.average_precision([False, True], [True, False], 1) == 0.5
    assert owdeval.average_precision([True, False], [False, True], 1) == 1.0
    # WI = 1.0: one known TP plus one known-labeled detection on an unknown GT
    names = ["a", "u"]
    gt_rows = [("im0", "a", (0, 0, 10, 10)), ("im0", "u", (20, 0, 30, 10))]
    manifest = make_manifest(names, gt_rows, 1)
    det_rows = [("im0", "a", (0, 0, 10, 10), 0.9, 0),
                ("im0", "a", (20, 0, 30, 10), 0.8, 1)]
    task = TaskSpec(stage="t1", known_classes=["a"], unknown_classes=["u"])
    dets = dets_from_rows(det_rows, ["a"])
    assert owdeval.wilderness_impact(dets, manifest, task) == 1.0
    assert owdeval.absolute_open_set_error(dets, manifest, task) == 1
    print("\nACCEPTANCE hand-computed-metrics: PASS (AP x3 exact, WI=1.0, A-OSE=1)")


def central_difference(f, x, eps=1e-5):
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return grad


def test_gradient_correctness():
    t0 = time.monotonic()
    rng = np.random.default_rng(99)
    worst = 0.0
    for point in range(20):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(3, 7))
        b = int(rng.integers(2, 8))
        scores = rng.standard_normal((b, n))
        labels = (rng.random((b, k)) < 0.5).astype(float)
        w = rng.standard_normal((k, n))
        analytic = attribpipe.selection_grad(w, scores, labels, 0.0)
        numeric = central_difference(
            lambda m: attribpipe.selection_loss(m, scores, labels, 0.0), w)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        worst = max(worst, float(rel.max()))

        d = int(rng.integers(3, 6))
        e_att = rng.standard_normal((n, d))
        blocks = [rng.standard_normal((2, d)) for _ in range(k)]
        ex = ExemplarSet([f"c{i}" for i in range(k)], blocks)
        kept = sorted(rng.choice(n, size=max(2, n - 2), replace=False).tolist())
        w2 = rng.standard_normal((k, n))
        analytic = attribpipe.refine_grad(e_att, w2, ex, kept=kept)
        numeric = central_difference(
            lambda m: attribpipe.refine_loss(m, w2, ex, kept=kept), e_att)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        worst = max(worst, float(rel.max()))
    elapsed = time.monotonic() - t0
    assert worst < 1e-4
    assert elapsed < 10.0
    print(f"\nACCEPTANCE gradient-correctness: PASS "
          f"(20 points, max rel err {worst:.2e}, {elapsed:.1f}s)")


def test_adaptation_convergence():
    t0 = time.monotonic()
    rng = np.random.default_rng(17)
    w = rng.standard_normal((10, 4))
    e_att = rng.standard_normal((4, 6))
    target = rng.standard_normal((10, 6))
    out = attribpipe.adapt_attributes(e_att, w, target, steps=5000)
    best, *_ = np.linalg.lstsq(w, target, rcond=None)
    residual = np.linalg.norm(w @ out - target)
    optimal = np.linalg.norm(w @ best - target)
    elapsed = time.monotonic() - t0
    assert residual <= optimal + 1e-4
    assert elapsed < 5.0
    print(f"\nACCEPTANCE adaptation-convergence: PASS "
          f"(residual {residual:.6f} vs normal-equations {optimal:.6f}, {elapsed:.1f}s)")


def load_world_sidecar(world_dir):
    return json.loads((world_dir / "world.json").read_text())


def score_test_proposals(world_dir, model_dir):
    """Recompute per-proposal scores with the saved model; returns
    (unknown-object p_unk list, distractor p_unk list, top-1 accuracy)."""
    model, e_att, _, _, _ = attribpipe.load_model(model_dir)
    test = load_manifest(world_dir / "test_manifest.json")
    sidecar = load_world_sidecar(world_dir)
    unk_names = set(sidecar["unknown"])
    kept_rows = np.asarray(e_att)[model.kept]
    pos, neg, ok, tot = [], [], 0, 0
    for rec in test.images:
        emb, boxes = test.load_proposals(rec)
        scores = embedspace.batched_attribute_scores(emb, kept_rows)
        logits = scores @ model.kept_weights().T
        gt = {tuple(a.box): a.class_index for a in rec.annotations}
        for p in range(emb.shape[0]):
            punk = inference.p_ood(logits[p]) * inference.p_id(scores[p])
            key = tuple(float(v) for v in boxes[p])
            if key in gt:
                ci = gt[key]
                if test.class_names[ci] in unk_names:
                    pos.append(punk)
                else:
                    pred = model.class_names[int(np.argmax(logits[p]))]
                    ok += pred == test.class_names[ci]
                    tot += 1
            else:
                neg.append(punk)
    return np.array(pos), np.array(neg), ok / tot


def auroc(pos, neg):
    ranks = np.argsort(np.argsort(np.concatenate([pos, neg])))
    n_pos, n_neg = len(pos), len(neg)
    return (ranks[:n_pos].sum() - n_pos * (n_pos - 1) / 2) / (n_pos * n_neg)


def test_synthetic_end_to_end(world):
    sidecar = load_world_sidecar(world["dir"])
    model_doc = json.loads(
        (world["runs"]["full"]["model"] / "model.json").read_text())
    hits = total = 0
    for c in range(6):
        planted = set(sidecar["supports"][c])
        selected = set(model_doc["selected_per_class"][c])
        hits += len(planted & selected)
        total += len(planted)
    recovery = hits / total
    pos, neg, top1 = score_test_proposals(world["dir"], world["runs"]["full"]["model"])
    area = auroc(pos, neg)
    assert recovery >= 0.90, f"support recovery {recovery:.2%}"
    assert area >= 0.95, f"AUROC {area:.4f}"
    assert top1 >= 0.95, f"top-1 accuracy {top1:.2%}"
    assert world["elapsed"] < 120.0
    print(f"\nACCEPTANCE synthetic-end-to-end: PASS (support recovery "
          f"{recovery:.0%}, AUROC {area:.4f}, top-1 {top1:.2%}, "
          f"{world['elapsed']:.1f}s incl. ablation pipelines)")


def test_ablation_directionality(world):
    reports = {}
    for tag, run in world["runs"].items():
        reports[tag] = json.loads((run["eval"] / "report.json").read_text())
    full = reports["full"]["k_map"]
    nosel = reports["no_selection"]["k_map"]
    noref = reports["no_refinement"]["k_map"]
    assert nosel < full, f"no-selection {nosel} vs full {full}"
    assert noref <= full, f"no-refinement {noref} vs full {full}"
    print(f"\nACCEPTANCE ablation-directionality: PASS "
          f"(K-mAP full {full:.2f} > no-selection {nosel:.2f}; "
          f"no-refinement {noref:.2f} <= full)")


def test_cli_determinism(world, tmp_path):
    world_dir = world["dir"]

    def one_run(root):
        select_dir, adapt_dir, refine_dir = root / "s", root / "a", root / "r"
        run_cli(["select", "--manifest", world_dir / "train_manifest.json",
                 "--split", world_dir / "split.json",
                 "--attributes", world_dir / "attributes.json",
                 "--out", select_dir, "--seed", SEED, "--n-hat", 2])
        run_cli(["adapt", "--manifest", world_dir / "train_manifest.json",
                 "--split", world_dir / "split.json", "--model", select_dir,
                 "--out", adapt_dir])
        run_cli(["refine", "--manifest", world_dir / "train_manifest.json",
                 "--split", world_dir / "split.json", "--model", adapt_dir,
                 "--out", refine_dir])
        infer_dir = root / "i"
        run_cli(["infer", "--manifest", world_dir / "test_manifest.json",
                 "--scorer", "fomo", "--model", refine_dir, "--out", infer_dir])
        eval_dir = root / "e"
        run_cli(["eval", "--detections", infer_dir / "detections.jsonl",
                 "--manifest", world_dir / "test_manifest.json",
                 "--split", world_dir / "split.json", "--stage", "t1",
                 "--out", eval_dir])
        return {
            "weights": sha(refine_dir / "weights.fomo"),
            "attributes": sha(refine_dir / "attributes.fomo"),
            "model": sha(refine_dir / "model.json"),
            "detections": sha(infer_dir / "detections.jsonl"),
            "report": sha(eval_dir / "report.json"),
            "table": sha(eval_dir / "report.txt"),
        }

    h1 = one_run(tmp_path / "run1")
    h2 = one_run(tmp_path / "run2")
    assert h1 == h2
    print("\nACCEPTANCE determinism: PASS (model files, detections, and reports "
          "byte-identical across reruns)")


def test_cap_compliance(world):
    # property over random instances
    rng = np.random.default_rng(12)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        k = int(rng.integers(1, 8))
        boxes = rng.uniform(0, 50, (n, 4)); boxes[:, 2:] += 60
        ds = assemble_detections("im", boxes, rng.random((n, k)), rng.random(n),
                                 cap=100, policy="joint")
        assert len(ds.detections) <= 100
    # and on the pipeline's own output
    per_image = {}
    det_file = world["runs"]["full"]["infer"] / "detections.jsonl"
    for line in det_file.read_text().splitlines():
        rec = json.loads(line)
        per_image[rec["image_id"]] = per_image.get(rec["image_id"], 0) + 1
    assert max(per_image.values()) <= 100
    print("\nACCEPTANCE cap-compliance: PASS (joint policy never exceeds "
          "100 detections per image)")
