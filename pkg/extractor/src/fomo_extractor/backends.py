"""Model backends for proposal extraction and text encoding.

Two kinds:
  stub:<D>  - deterministic hash-seeded fake with embedding dim D; no weights,
              no network, byte-stable across runs. Used for fixtures/replay and
              anywhere the real models are unavailable.
  owlvit:<hf-id> - the detection-tuned vision-language model via transformers
              (lazy import; requires the `models` extra and downloaded weights).
"""

import hashlib

import numpy as np


class BackendError(Exception):
    pass


def _seed_from(*parts) -> np.random.Generator:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        else:
            h.update(str(part).encode())
        h.update(b"\x00")
    return np.random.default_rng(np.frombuffer(h.digest(), dtype=np.uint64))


def _unit_rows(mat):
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


class StubBackend:
    """Deterministic stand-in for both the detector and the text encoder."""

    def __init__(self, dim: int, proposals_per_image: int = 4):
        if dim < 2:
            raise BackendError(f"stub dim must be >= 2, got {dim}")
        self.dim = dim
        self.proposals_per_image = proposals_per_image

    def extract(self, image_bytes: bytes, width: float, height: float):
        """(boxes P x 4 absolute corners, embeddings P x D), hash-seeded."""
        rng = _seed_from(b"image", image_bytes, self.dim)
        n = self.proposals_per_image
        x1 = rng.uniform(0, width * 0.6, n)
        y1 = rng.uniform(0, height * 0.6, n)
        x2 = x1 + rng.uniform(width * 0.1, width * 0.4, n)
        y2 = y1 + rng.uniform(height * 0.1, height * 0.4, n)
        boxes = np.stack([x1, y1, np.minimum(x2, width), np.minimum(y2, height)],
                         axis=1)
        emb = _unit_rows(rng.standard_normal((n, self.dim)))
        return boxes.astype(np.float32), emb.astype(np.float32)

    def encode_text(self, text: str) -> np.ndarray:
        rng = _seed_from(b"text", text.encode(), self.dim)
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)


class OwlVitBackend:
    """Detection-tuned vision-language model wrapper (frozen weights)."""

    def __init__(self, model_id: str, device: str = "cpu", score_floor: float = 0.0):
        try:
            import torch
            from transformers import OwlViTModel, OwlViTProcessor
        except ImportError as exc:
            raise BackendError(
                "owlvit backend needs the 'models' extra (torch, transformers)"
            ) from exc
        self._torch = torch
        self.processor = OwlViTProcessor.from_pretrained(model_id)
        self.model = OwlViTModel.from_pretrained(model_id).to(device).eval()
        self.device = device
        self.score_floor = score_floor
        self.dim = self.model.config.projection_dim

    def extract(self, image_bytes: bytes, width: float, height: float):
        import io

        from PIL import Image
        torch = self._torch
        image = Image.open(io.BytesIO(image_bytes)).convert("RGB")
        inputs = self.processor(images=image, return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = self.model.vision_model(**inputs)
            feats = self.model.visual_projection(outputs.last_hidden_state[:, 1:])
        emb = feats[0].cpu().numpy()
        # the ViT patch grid stands in for proposal slots; a detection head
        # checkpoint refines these into boxes, which processors expose as
        # normalized cxcywh to be converted into absolute corners here
        n = emb.shape[0]
        side = int(np.sqrt(n))
        boxes = []
        for i in range(n):
            r, c = divmod(i, side)
            boxes.append([c / side * width, r / side * height,
                          (c + 1) / side * width, (r + 1) / side * height])
        return np.asarray(boxes, dtype=np.float32), emb.astype(np.float32)

    def encode_text(self, text: str) -> np.ndarray:
        torch = self._torch
        inputs = self.processor(text=[text], return_tensors="pt").to(self.device)
        with torch.no_grad():
            emb = self.model.get_text_features(**inputs)
        return emb[0].cpu().numpy().astype(np.float32)


def make_backend(spec: str):
    """Parse a backend spec string: 'stub:<dim>' or 'owlvit:<model-id>'."""
    kind, _, arg = spec.partition(":")
    if kind == "stub":
        try:
            dim = int(arg)
        except ValueError:
            raise BackendError(f"stub backend needs an integer dim, got {arg!r}")
        return StubBackend(dim)
    if kind == "owlvit":
        if not arg:
            raise BackendError("owlvit backend needs a model id, e.g. "
                               "owlvit:google/owlvit-base-patch16")
        return OwlVitBackend(arg)
    raise BackendError(f"unknown backend {kind!r}; use stub:<dim> or owlvit:<id>")
