"""Command-line driver: stage-separated pipeline commands with reproducible,
provenance-stamped outputs."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import attribpipe, benchkit, embedspace, inference, owdeval, tensorio


class ConfigError(Exception):
    """Carries every validation violation, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_provenance(out_dir: Path, command: str, config: dict, inputs: dict,
                      outputs: dict) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in sorted(inputs.items())},
        "outputs": {name: {"path": str(p), "sha256": _sha256(p)}
                    for name, p in sorted(outputs.items())},
    }
    (out_dir / "provenance.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_paths(pairs) -> None:
    problems = [f"{name}: path {p!r} does not exist"
                for name, p in pairs if p is None or not Path(p).exists()]
    if problems:
        raise ConfigError(problems)


def _load_config_defaults(args) -> dict:
    if getattr(args, "config", None):
        _require_paths([("--config", args.config)])
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ConfigError(["--config: must be a JSON object"])
        for key, value in doc.items():
            attr = key.replace("-", "_")
            if hasattr(args, attr) and getattr(args, attr) is None:
                setattr(args, attr, value)
    return vars(args)


def _stage_classes(plan: benchkit.SplitPlan, stage: str) -> list[str]:
    if stage == "t1":
        return list(plan.t1_known)
    return list(plan.t1_known) + list(plan.t1_unknown)


def _train_config(args) -> attribpipe.TrainConfig:
    problems = []
    if args.seed is None:
        problems.append("--seed is required")
    if problems:
        raise ConfigError(problems)
    kwargs = {"seed": args.seed}
    for flag, name in (("lr", "learning_rate"), ("epochs", "epochs"),
                       ("l1", "l1_weight"), ("n_hat", "n_hat")):
        value = getattr(args, flag, None)
        if value is not None:
            kwargs[name] = value
    try:
        return attribpipe.TrainConfig(**kwargs)
    except attribpipe.TrainingError as exc:
        raise ConfigError([str(exc)]) from exc


def _echo_config(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


# --- commands ---------------------------------------------------------------


def cmd_split(args) -> None:
    _require_paths([("--manifest", args.manifest)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = tensorio.load_manifest(args.manifest)
    plan = benchkit.build_split(manifest, args.dataset_name or "dataset")
    plan_path = out / "split.json"
    benchkit.save_split(plan, plan_path)
    _write_provenance(out, "split", _echo_config(args, ["dataset_name"]),
                      {"manifest": args.manifest}, {"split": plan_path})


def cmd_prompts(args) -> None:
    problems = []
    classes: list[str] = []
    if args.classes:
        classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    elif args.split:
        _require_paths([("--split", args.split)])
        classes = benchkit.load_split(args.split).t1_known
    else:
        problems.append("one of --classes or --split is required")
    if problems:
        raise ConfigError(problems)
    categories = (tuple(c.strip() for c in args.categories.split(",") if c.strip())
                  if args.categories else embedspace.DEFAULT_CATEGORIES)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    request = embedspace.render_llm_requests(classes, categories)
    req_path = out / "prompt_request.json"
    request.save(req_path)
    inputs = {"split": args.split} if args.split else {}
    _write_provenance(out, "prompts", _echo_config(args, ["classes", "categories"]),
                      inputs, {"prompt_request": req_path})


def _load_pipeline_inputs(args, need_catalog=True):
    pairs = [("--manifest", args.manifest), ("--split", args.split)]
    if need_catalog:
        pairs.append(("--attributes", args.attributes))
    _require_paths(pairs)
    manifest = tensorio.load_manifest(args.manifest)
    plan = benchkit.load_split(args.split)
    catalog = embedspace.load_catalog(args.attributes) if need_catalog else None
    return manifest, plan, catalog


def cmd_select(args) -> None:
    manifest, plan, catalog = _load_pipeline_inputs(args)
    cfg = _train_config(args)
    if catalog.embeddings is None:
        raise ConfigError(["--attributes: catalog has no embeddings"])
    classes = _stage_classes(plan, args.stage)
    exemplars = attribpipe.build_exemplar_set(
        manifest, args.shots, mode="fomo", seed=cfg.seed, class_names=classes)
    model = attribpipe.select_attributes(catalog.embeddings, exemplars, cfg)
    out = Path(args.out)
    attribpipe.save_model(out, model, catalog.embeddings, catalog.entries, cfg,
                          stages=["select"])
    _write_provenance(
        out, "select",
        {**_echo_config(args, ["stage", "shots"]), "train": vars(cfg).copy()},
        {"manifest": args.manifest, "split": args.split, "attributes": args.attributes},
        {name: out / name for name in
         (attribpipe.MODEL_FILE, attribpipe.WEIGHTS_FILE, attribpipe.ATTRIBUTES_FILE)})


def _load_or_init_model(args, manifest, plan):
    """Stage commands start from a model dir, or from an unselected model
    (seeded init, all attributes kept) so ablations can omit the select stage."""
    if args.model:
        _require_paths([("--model", args.model)])
        model, e_att, entries, cfg, stages = attribpipe.load_model(args.model)
        return model, e_att, entries, cfg, stages
    if not args.attributes:
        raise ConfigError(["--model or --attributes is required"])
    _require_paths([("--attributes", args.attributes)])
    catalog = embedspace.load_catalog(args.attributes)
    if catalog.embeddings is None:
        raise ConfigError(["--attributes: catalog has no embeddings"])
    cfg = _train_config(args)
    classes = _stage_classes(plan, args.stage)
    n_attr = catalog.embeddings.shape[0]
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(n_attr)
    w = rng.uniform(-bound, bound, size=(len(classes), n_attr))
    model = attribpipe.SelectionModel(
        w=w, kept=list(range(n_attr)),
        selected_per_class=[list(range(n_attr)) for _ in classes],
        n_hat=cfg.n_hat, class_names=classes)
    return model, np.asarray(catalog.embeddings, dtype=np.float64), \
        catalog.entries, cfg, ["init"]


def cmd_adapt(args) -> None:
    manifest, plan, _ = _load_pipeline_inputs(args, need_catalog=False)
    model, e_att, entries, cfg, stages = _load_or_init_model(args, manifest, plan)
    exemplars = attribpipe.build_exemplar_set(
        manifest, args.shots, mode="fomo", seed=cfg.seed,
        class_names=model.class_names)
    kept = model.kept
    e_att = np.array(e_att)
    e_att[kept] = attribpipe.adapt_attributes(
        e_att[kept], model.w[:, kept], exemplars.class_means,
        steps=args.steps, lr=args.adapt_lr)
    out = Path(args.out)
    attribpipe.save_model(out, model, e_att, entries, cfg, stages=stages + ["adapt"])
    inputs = {"manifest": args.manifest, "split": args.split}
    if args.model:
        inputs["model"] = Path(args.model) / attribpipe.MODEL_FILE
    _write_provenance(
        out, "adapt",
        {**_echo_config(args, ["stage", "shots", "steps", "adapt_lr"]),
         "train": vars(cfg).copy()},
        inputs,
        {name: out / name for name in
         (attribpipe.MODEL_FILE, attribpipe.WEIGHTS_FILE, attribpipe.ATTRIBUTES_FILE)})


def cmd_refine(args) -> None:
    manifest, plan, _ = _load_pipeline_inputs(args, need_catalog=False)
    model, e_att, entries, cfg, stages = _load_or_init_model(args, manifest, plan)
    exemplars = attribpipe.build_exemplar_set(
        manifest, args.shots, mode="fomo", seed=cfg.seed,
        class_names=model.class_names)
    # the refinement stage defaults gentler than selection: the BCE here is
    # class-imbalanced and long runs depress all scores through a transient
    refine_cfg = attribpipe.TrainConfig(
        seed=cfg.seed,
        learning_rate=args.lr if args.lr is not None else 0.01,
        epochs=args.epochs if args.epochs is not None else 200,
        l1_weight=cfg.l1_weight, n_hat=cfg.n_hat, tol=cfg.tol)
    e_att = attribpipe.refine_attributes(e_att, model.w, exemplars, refine_cfg,
                                         kept=model.kept)
    out = Path(args.out)
    attribpipe.save_model(out, model, e_att, entries, cfg, stages=stages + ["refine"])
    inputs = {"manifest": args.manifest, "split": args.split}
    if args.model:
        inputs["model"] = Path(args.model) / attribpipe.MODEL_FILE
    _write_provenance(
        out, "refine",
        {**_echo_config(args, ["stage", "shots"]), "train": vars(refine_cfg).copy()},
        inputs,
        {name: out / name for name in
         (attribpipe.MODEL_FILE, attribpipe.WEIGHTS_FILE, attribpipe.ATTRIBUTES_FILE)})


def _bank_rows(names, matrix, wanted):
    idx = {n: i for i, n in enumerate(names)}
    missing = [n for n in wanted if n not in idx]
    if missing:
        raise ConfigError([f"name bank is missing classes: {missing}"])
    return np.stack([matrix[idx[n]] for n in wanted])


def _build_scorer(args, plan):
    kind = {"fomo": "fomo", "base": "base_generic", "imagenet": "imagenet_names",
            "llm": "llm_names", "gt": "gt_names", "fs": "few_shot"}[args.scorer]
    if kind == "fomo":
        _require_paths([("--model", args.model)])
        model, e_att, _, _, _ = attribpipe.load_model(args.model)
        spec = inference.ScorerSpec(kind="fomo", selection_model=model,
                                    attribute_embeddings=e_att,
                                    class_names=model.class_names)
        spec.validate()
        return spec, model.class_names

    classes = _stage_classes(plan, args.stage)
    if kind == "few_shot":
        _require_paths([("--train-manifest", args.train_manifest),
                        ("--generic", args.generic)])
        if args.seed is None:
            raise ConfigError(["--seed is required for the fs scorer"])
        train_manifest = tensorio.load_manifest(args.train_manifest)
        exemplars = attribpipe.build_exemplar_set(
            train_manifest, args.shots, mode="average", seed=args.seed,
            class_names=classes)
        _, generic = inference.load_text_bank(args.generic)
        spec = inference.ScorerSpec(kind=kind, class_names=classes,
                                    class_embeddings=exemplars.class_means,
                                    generic_embedding=generic[0])
        spec.validate()
        return spec, classes

    _require_paths([("--class-text", args.class_text)])
    bank_names, bank = inference.load_text_bank(args.class_text)
    class_emb = _bank_rows(bank_names, bank, classes)
    if kind == "base_generic":
        _require_paths([("--generic", args.generic)])
        _, generic = inference.load_text_bank(args.generic)
        spec = inference.ScorerSpec(kind=kind, class_names=classes,
                                    class_embeddings=class_emb,
                                    generic_embedding=generic[0])
    else:
        _require_paths([("--names", args.names)])
        prop_names, prop_emb = inference.load_text_bank(args.names)
        spec = inference.ScorerSpec(kind=kind, class_names=classes,
                                    class_embeddings=class_emb,
                                    proposal_names=prop_names,
                                    proposal_embeddings=prop_emb)
    spec.validate()
    return spec, classes


def _score_image(manifest, rec, spec):
    emb, boxes = manifest.load_proposals(rec)
    if spec.kind == "fomo":
        model = spec.selection_model
        e_kept = np.asarray(spec.attribute_embeddings)[model.kept]
        scores = embedspace.batched_attribute_scores(emb, e_kept)
        logits = scores @ model.kept_weights().T
        known = attribpipe._sigmoid(logits)
        unknown = np.array([inference.p_ood(logits[p]) * inference.p_id(scores[p])
                            for p in range(emb.shape[0])])
    else:
        known = np.stack([inference.score_known(emb[p], spec)
                          for p in range(emb.shape[0])])
        unknown = np.array([inference.score_unknown_baseline(emb[p], spec)
                            for p in range(emb.shape[0])])
    return boxes, known, unknown


def cmd_infer(args) -> None:
    _require_paths([("--manifest", args.manifest)])
    plan = None
    if args.scorer != "fomo":
        _require_paths([("--split", args.split)])
        plan = benchkit.load_split(args.split)
    manifest = tensorio.load_manifest(args.manifest)
    spec, _ = _build_scorer(args, plan)

    cap = args.cap if args.cap is not None else inference.DEFAULT_CAP
    policy = args.policy or ("split" if args.scorer == "fs" else "joint")
    split_sizes = (args.split_known, args.split_unknown)

    def run_one(rec):
        boxes, known, unknown = _score_image(manifest, rec, spec)
        return inference.assemble_detections(
            rec.image_id, boxes, known, unknown, cap=cap, policy=policy,
            split_sizes=split_sizes)

    workers = args.workers or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            detection_sets = list(pool.map(run_one, manifest.images))
    else:
        detection_sets = [run_one(rec) for rec in manifest.images]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det_path = out / "detections.jsonl"
    inference.save_detections(detection_sets, det_path)
    inputs = {"manifest": args.manifest}
    for name in ("model", "split", "class_text", "names", "generic", "train_manifest"):
        value = getattr(args, name)
        if value:
            p = Path(value)
            inputs[name] = p / attribpipe.MODEL_FILE if (name == "model") else p
    _write_provenance(
        out, "infer",
        _echo_config(args, ["scorer", "cap", "policy", "stage", "shots", "seed",
                            "workers", "split_known", "split_unknown"]),
        inputs, {"detections": det_path})


def cmd_eval(args) -> None:
    _require_paths([("--detections", args.detections), ("--manifest", args.manifest),
                    ("--split", args.split)])
    manifest = tensorio.load_manifest(args.manifest)
    plan = benchkit.load_split(args.split)
    if args.stage == "t1":
        task = owdeval.TaskSpec(stage="t1", known_classes=plan.t1_known,
                                unknown_classes=plan.t1_unknown)
    else:
        task = owdeval.TaskSpec(stage="t2", prev_known=plan.t1_known,
                                curr_known=plan.t1_unknown)
    detection_sets = inference.load_detections(args.detections)
    report = owdeval.evaluate_task(detection_sets, manifest, task,
                                   recall_level=args.recall_level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    table_path = out / "report.txt"
    owdeval.save_report(report, json_path, table_path)
    _write_provenance(
        out, "eval", _echo_config(args, ["stage", "recall_level"]),
        {"detections": args.detections, "manifest": args.manifest,
         "split": args.split},
        {"report_json": json_path, "report_table": table_path})


def cmd_synth(args) -> None:
    problems = []
    if args.seed is None:
        problems.append("--seed is required")
    if problems:
        raise ConfigError(problems)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    benchkit.generate_world(
        k_known=args.k_known, k_unknown=args.k_unknown,
        n_attributes=args.n_attributes, n_star=args.n_star, dim=args.dim,
        sigma=args.sigma, n_distractors=args.distractors, seed=args.seed,
        out_dir=out, train_per_class=args.train_per_class,
        test_per_class=args.test_per_class, objectness=args.objectness,
        nuisance=args.nuisance, weight_jitter=args.weight_jitter)
    outputs = {name: out / name for name in
               ("train_manifest.json", "train_t2_manifest.json",
                "test_manifest.json", "attributes.json", "split.json",
                "class_text.json", "generic.json", "world.json")}
    _write_provenance(
        out, "synth",
        _echo_config(args, ["k_known", "k_unknown", "n_attributes", "n_star",
                            "dim", "sigma", "distractors", "seed",
                            "train_per_class", "test_per_class", "objectness",
                            "nuisance", "weight_jitter"]),
        {}, outputs)


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fomo",
        description="attribute-based open-world detection pipeline over "
                    "precomputed embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file supplying flag defaults")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("split", help="build a frequency-based class split")
    common(p)
    p.add_argument("--manifest", help="train manifest")
    p.add_argument("--dataset-name")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("prompts", help="render attribute-generation prompts")
    common(p)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--split", help="split plan (uses t1 known classes)")
    p.add_argument("--categories", help="comma-separated category list")
    p.set_defaults(func=cmd_prompts)

    def train_flags(p):
        p.add_argument("--manifest", help="train manifest")
        p.add_argument("--split", help="split plan")
        p.add_argument("--stage", choices=("t1", "t2"), default="t1")
        p.add_argument("--shots", type=int, default=100)
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--l1", type=float)
        p.add_argument("--n-hat", type=int, dest="n_hat")

    p = sub.add_parser("select", help="train the class-attribute weights and prune")
    common(p)
    train_flags(p)
    p.add_argument("--attributes", help="attribute catalog JSON")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("adapt", help="align attribute embeddings to exemplar means")
    common(p)
    train_flags(p)
    p.add_argument("--model", help="model dir from a previous stage")
    p.add_argument("--attributes", help="catalog JSON (to start without selection)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--adapt-lr", type=float, dest="adapt_lr")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("refine", help="refine attribute embeddings, weights frozen")
    common(p)
    train_flags(p)
    p.add_argument("--model", help="model dir from a previous stage")
    p.add_argument("--attributes", help="catalog JSON (to start without selection)")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("infer", help="score proposals and assemble detections")
    common(p)
    p.add_argument("--manifest", help="test manifest")
    p.add_argument("--scorer", choices=("fomo", "base", "imagenet", "llm", "gt", "fs"),
                   required=True)
    p.add_argument("--model", help="model dir (fomo scorer)")
    p.add_argument("--split", help="split plan (baseline scorers)")
    p.add_argument("--stage", choices=("t1", "t2"), default="t1")
    p.add_argument("--class-text", dest="class_text", help="class-name text bank")
    p.add_argument("--names", help="unknown-proposal name bank")
    p.add_argument("--generic", help="generic-object prompt bank")
    p.add_argument("--train-manifest", dest="train_manifest", help="fs exemplar source")
    p.add_argument("--shots", type=int, default=100)
    p.add_argument("--cap", type=int)
    p.add_argument("--policy", choices=("joint", "split"))
    p.add_argument("--split-known", type=int, default=50)
    p.add_argument("--split-unknown", type=int, default=50)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    common(p)
    p.add_argument("--detections")
    p.add_argument("--manifest", help="test manifest with ground truth")
    p.add_argument("--split", help="split plan")
    p.add_argument("--stage", choices=("t1", "t2"), default="t1")
    p.add_argument("--recall-level", type=float, dest="recall_level")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic benchmark world")
    common(p)
    p.add_argument("--k-known", type=int, default=6)
    p.add_argument("--k-unknown", type=int, default=3)
    p.add_argument("--n-attributes", type=int, default=32)
    p.add_argument("--n-star", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--distractors", type=int, default=200)
    p.add_argument("--train-per-class", type=int, default=20)
    p.add_argument("--test-per-class", type=int, default=40)
    p.add_argument("--objectness", type=float, default=1.0)
    p.add_argument("--nuisance", type=float, default=0.45)
    p.add_argument("--weight-jitter", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _load_config_defaults(args)
        args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except (tensorio.TensorIOError, embedspace.EmbedSpaceError,
            attribpipe.TrainingError, attribpipe.ExemplarError,
            owdeval.EvalError, inference.InferenceError,
            benchkit.BenchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
