"""Text embedding with prompt-template ensembling."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backends import make_backend
from .tensorout import write_tensor

# the seven CLIP prompt templates the detector family ensembles over
SEVEN_BEST_TEMPLATES = (
    "itap of a {}.",
    "a bad photo of the {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
)


class EmbedError(Exception):
    pass


def embed_texts(strings, backend, templates=SEVEN_BEST_TEMPLATES) -> np.ndarray:
    """One row per string: the rowwise mean of its per-template embeddings."""
    strings = list(strings)
    if not strings:
        raise EmbedError("no strings to embed")
    templates = list(templates)
    if not templates:
        raise EmbedError("no templates to ensemble")
    rows = []
    for text in strings:
        if not text or not text.strip():
            raise EmbedError("cannot embed an empty string")
        stack = np.stack([backend.encode_text(t.format(text)) for t in templates])
        rows.append(stack.mean(axis=0))
    return np.stack(rows).astype(np.float32)


def embed_to_bank(strings, backend_spec, out_path, templates=SEVEN_BEST_TEMPLATES,
                  tensor_name=None) -> None:
    """Write a name bank (JSON + tensor) in the consumer's format."""
    backend = make_backend(backend_spec)
    matrix = embed_texts(strings, backend, templates)
    out_path = Path(out_path)
    tensor_name = tensor_name or (out_path.stem + ".fomo")
    write_tensor(out_path.parent / tensor_name, matrix)
    out_path.write_text(json.dumps(
        {"names": list(strings), "embedding_tensor": tensor_name},
        indent=2, sort_keys=True) + "\n")
