"""Embedding-space primitives: cosine scoring, attribute catalogs, prompt rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor

DEFAULT_CATEGORIES = ("shape", "size", "texture", "color", "material", "function")

# The encode template reads "object which (is/has/etc) <Category> is <Attribute>";
# this table fixes the middle segment per category so rendering is deterministic.
_COPULA_TABLE = {
    "shape": "has shape is",
    "size": "has size is",
    "texture": "has texture is",
    "color": "has color is",
    "material": "has material is",
    "function": "is for",
    "behavior": "is for",
}

_GENERATION_TEMPLATE = (
    "I am using a language-vision model to identify {cls}. "
    "List the {category} attributes of {cls}, which will be used for detection."
)


class EmbedSpaceError(Exception):
    pass


def normalize_attribute_text(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace (dedup equality)."""
    return " ".join(text.lower().split())


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise EmbedSpaceError("cosine similarity undefined for a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def attribute_scores(e_v, e_att) -> np.ndarray:
    """Cosine of a visual embedding against every attribute row, catalog order."""
    e_v = np.asarray(e_v, dtype=np.float64)
    e_att = np.asarray(e_att, dtype=np.float64)
    if e_att.ndim != 2 or e_v.shape[-1] != e_att.shape[1]:
        raise EmbedSpaceError(
            f"dimension mismatch: vector {e_v.shape} vs attribute matrix {e_att.shape}"
        )
    nv = np.linalg.norm(e_v)
    if nv == 0.0:
        raise EmbedSpaceError("cosine similarity undefined for a zero-norm vector")
    row_norms = np.linalg.norm(e_att, axis=1)
    return (e_att @ e_v) / (row_norms * nv)


def batched_attribute_scores(embeddings, e_att) -> np.ndarray:
    """attribute_scores for a B x D stack of embeddings; returns B x N."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    e_att = np.asarray(e_att, dtype=np.float64)
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(xn == 0.0):
        raise EmbedSpaceError("cosine similarity undefined for a zero-norm vector")
    an = np.linalg.norm(e_att, axis=1)
    return (x @ e_att.T) / (xn * an[None, :])


@dataclass(frozen=True)
class AttributeEntry:
    text: str
    category: str
    source_class: str


class AttributeCatalog:
    """Deduplicated attribute strings plus (optionally) their embedding rows."""

    def __init__(self, entries, embeddings=None):
        collapsed: list[AttributeEntry] = []
        seen: set[tuple[str, str]] = set()
        for entry in entries:
            text = normalize_attribute_text(entry.text)
            category = normalize_attribute_text(entry.category)
            if not text or not category:
                raise EmbedSpaceError("attribute entries need nonempty text and category")
            key = (category, text)
            if key in seen:
                continue
            seen.add(key)
            collapsed.append(AttributeEntry(text, category, entry.source_class))
        if not collapsed:
            raise EmbedSpaceError("attribute catalog is empty")
        self.entries: list[AttributeEntry] = collapsed
        self.embeddings: np.ndarray | None = None
        if embeddings is not None:
            self._set_embeddings(embeddings)

    def _set_embeddings(self, embeddings) -> None:
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float32))
        if emb.shape[0] != len(self.entries):
            raise EmbedSpaceError(
                f"{emb.shape[0]} embedding rows for {len(self.entries)} catalog entries"
            )
        norms = np.linalg.norm(emb.astype(np.float64), axis=1)
        zero = np.nonzero(norms == 0.0)[0]
        if zero.size:
            raise EmbedSpaceError(f"zero-norm attribute embedding rows at {zero.tolist()}")
        self.embeddings = emb

    def with_embeddings(self, embeddings) -> "AttributeCatalog":
        cat = AttributeCatalog(self.entries)
        cat._set_embeddings(embeddings)
        return cat

    def __len__(self) -> int:
        return len(self.entries)

    def texts(self) -> list[str]:
        return [e.text for e in self.entries]


def render_attribute_prompt(entry: AttributeEntry, copula_overrides=None) -> str:
    """Render the text-encoder prompt for one attribute entry."""
    text = normalize_attribute_text(entry.text)
    category = normalize_attribute_text(entry.category)
    if not text:
        raise EmbedSpaceError("attribute text must be nonempty")
    table = dict(_COPULA_TABLE)
    if copula_overrides:
        table.update(copula_overrides)
    if category not in table:
        raise EmbedSpaceError(
            f"unknown category {category!r}; known categories: {sorted(table)}"
        )
    return f"object which {table[category]} {text}"


@dataclass
class PromptRequest:
    """Rendered attribute-generation prompts, one per (class, category)."""

    class_names: list[str]
    categories: list[str]
    requests: list[dict]  # {"class_name", "category", "prompt"}

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "class_names": self.class_names,
            "categories": self.categories,
            "requests": self.requests,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def render_llm_requests(class_names, categories=DEFAULT_CATEGORIES) -> PromptRequest:
    """One generation prompt per (unique class, category) pair."""
    unique: list[str] = []
    for name in class_names:
        if name not in unique:
            unique.append(name)
    if not unique:
        raise EmbedSpaceError("class list is empty")
    categories = list(categories)
    requests = [
        {
            "class_name": cls,
            "category": cat,
            "prompt": _GENERATION_TEMPLATE.format(cls=cls, category=cat),
        }
        for cls in unique
        for cat in categories
    ]
    return PromptRequest(class_names=unique, categories=categories, requests=requests)


def ingest_attribute_responses(responses) -> AttributeCatalog:
    """Union the per-(class, category) attribute lists into a deduplicated catalog.

    Accepts either the response document ({"responses": [...]}) or the bare
    list of {"class_name", "category", "attributes"} records.
    """
    if isinstance(responses, dict):
        responses = responses.get("responses", [])
    entries: list[AttributeEntry] = []
    for rec in responses:
        cls = rec["class_name"]
        category = rec["category"]
        for text in rec["attributes"]:
            if not normalize_attribute_text(text):
                continue
            entries.append(AttributeEntry(text=text, category=category, source_class=cls))
    if not entries:
        raise EmbedSpaceError("no attributes in any response")
    return AttributeCatalog(entries)


def load_responses(path) -> AttributeCatalog:
    doc = json.loads(Path(path).read_text())
    return ingest_attribute_responses(doc)


def save_catalog(catalog: AttributeCatalog, path, tensor_name=None) -> None:
    """Persist a catalog as JSON (+ a tensor file when embeddings are present)."""
    path = Path(path)
    doc: dict = {
        "entries": [
            {"text": e.text, "category": e.category, "source_class": e.source_class}
            for e in catalog.entries
        ]
    }
    if catalog.embeddings is not None:
        tensor_name = tensor_name or (path.stem + ".fomo")
        write_tensor(path.parent / tensor_name, catalog.embeddings)
        doc["embedding_tensor"] = tensor_name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_catalog(path) -> AttributeCatalog:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = [
        AttributeEntry(rec["text"], rec["category"], rec.get("source_class", ""))
        for rec in doc["entries"]
    ]
    emb = None
    if doc.get("embedding_tensor"):
        emb = read_tensor(path.parent / doc["embedding_tensor"])
    return AttributeCatalog(entries, embeddings=emb)
