"""Extractor CLI: extract / embed / llm subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import BackendError
from .embed import SEVEN_BEST_TEMPLATES, embed_to_bank
from .extract import ExtractionError, ExtractionJob, extract_proposals
from .llm import ApiClient, LLMConfig, LLMError, ReplayStore, run_llm_requests
from .tensorout import TensorWriteError


def cmd_extract(args) -> None:
    job = ExtractionJob(image_dir=Path(args.images),
                        annotation_file=Path(args.annotations),
                        backend_spec=args.model, out_dir=Path(args.out))
    manifest = extract_proposals(job)
    print(f"wrote {manifest}")
    if job.errors:
        print(f"{len(job.errors)} image(s) failed; see errors.json", file=sys.stderr)


def cmd_embed(args) -> None:
    if args.texts_file:
        strings = [ln for ln in Path(args.texts_file).read_text().splitlines()
                   if ln.strip()]
    else:
        strings = [t.strip() for t in args.texts.split(",") if t.strip()]
    templates = SEVEN_BEST_TEMPLATES
    if args.templates:
        templates = [ln for ln in Path(args.templates).read_text().splitlines()
                     if ln.strip()]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    embed_to_bank(strings, args.model, out, templates)
    print(f"wrote {out}")


def cmd_llm(args) -> None:
    if args.replay:
        client = ReplayStore(args.replay)
    else:
        client = ApiClient(LLMConfig(model=args.llm_model,
                                     temperature=args.temperature))
    path = run_llm_requests(args.requests, args.out, client)
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fomo-extract",
        description="emit proposal/text embeddings and LLM attribute responses "
                    "as tensor manifests")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="detector proposals over a COCO dataset")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--annotations", required=True, help="COCO annotation JSON")
    p.add_argument("--model", required=True, help="stub:<dim> or owlvit:<hf-id>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("embed", help="embed texts with prompt ensembling")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--texts", help="comma-separated strings")
    group.add_argument("--texts-file", help="one string per line")
    p.add_argument("--templates", help="template file, one per line "
                                       "(default: the seven-template ensemble)")
    p.add_argument("--model", required=True, help="stub:<dim> or owlvit:<hf-id>")
    p.add_argument("--out", required=True, help="bank JSON path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("llm", help="answer attribute-generation prompts")
    p.add_argument("--requests", required=True, help="prompt request JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--replay", help="fixture file; answers come from it, offline")
    p.add_argument("--llm-model", default="gpt-3.5-turbo-instruct")
    p.add_argument("--temperature", type=float, default=0.5)
    p.set_defaults(func=cmd_llm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (BackendError, ExtractionError, LLMError, TensorWriteError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
