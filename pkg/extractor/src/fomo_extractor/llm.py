"""LLM client for attribute generation: live API calls with retry/backoff, or
byte-stable replay from a checked-in fixture."""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path


class LLMError(Exception):
    pass


@dataclass
class LLMConfig:
    model: str = "gpt-3.5-turbo-instruct"
    temperature: float = 0.5
    api_base: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    max_retries: int = 3
    backoff: float = 1.5


_SPLIT = re.compile(r"[;\n,]+")
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_attribute_list(text: str) -> list[str]:
    """Split a list-formatted answer into clean attribute strings."""
    out = []
    for piece in _SPLIT.split(text or ""):
        piece = _BULLET.sub("", piece).strip().strip(".")
        if piece:
            out.append(piece)
    return out


class ReplayStore:
    """prompt -> canned completion text, from a fixture JSON."""

    def __init__(self, path):
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise LLMError(f"{path}: replay fixture must map prompts to responses")
        self.responses = doc

    def complete(self, prompt: str) -> str:
        if prompt not in self.responses:
            raise LLMError(f"replay fixture has no response for prompt: {prompt[:80]!r}")
        return self.responses[prompt]


class ApiClient:
    def __init__(self, config: LLMConfig):
        self.config = config
        key = os.environ.get(config.api_key_env)
        if not key:
            raise LLMError(f"set {config.api_key_env} in the environment")
        self._key = key

    def complete(self, prompt: str) -> str:
        import requests

        last_error = None
        for attempt in range(self.config.max_retries):
            try:
                resp = requests.post(
                    f"{self.config.api_base}/completions",
                    headers={"Authorization": f"Bearer {self._key}"},
                    json={"model": self.config.model, "prompt": prompt,
                          "temperature": self.config.temperature,
                          "max_tokens": 256},
                    timeout=60)
                resp.raise_for_status()
                return resp.json()["choices"][0]["text"]
            except Exception as exc:  # noqa: BLE001 - retried, then recorded
                last_error = exc
                time.sleep(self.config.backoff ** attempt)
        raise LLMError(f"request failed after {self.config.max_retries} tries: "
                       f"{last_error}")


def run_llm_requests(request_file, out_dir, client) -> Path:
    """Answer every prompt in the request document; persist raw and parsed.

    Per-prompt failures become error records instead of aborting the run.
    Returns the parsed-responses path (the consumer's response format).
    """
    doc = json.loads(Path(request_file).read_text())
    requests_list = doc.get("requests")
    if not isinstance(requests_list, list):
        raise LLMError(f"{request_file}: not a prompt request document")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    raw, parsed, errors = [], [], []
    for item in requests_list:
        prompt = item["prompt"]
        try:
            text = client.complete(prompt)
        except LLMError as exc:
            errors.append({"class_name": item["class_name"],
                           "category": item["category"], "error": str(exc)})
            continue
        raw.append({"class_name": item["class_name"], "category": item["category"],
                    "prompt": prompt, "text": text})
        attributes = parse_attribute_list(text)
        parsed.append({"class_name": item["class_name"],
                       "category": item["category"], "attributes": attributes})

    (out_dir / "raw_responses.json").write_text(
        json.dumps(raw, indent=2, sort_keys=True) + "\n")
    parsed_path = out_dir / "responses.json"
    parsed_path.write_text(json.dumps(
        {"version": 1, "responses": parsed}, indent=2, sort_keys=True) + "\n")
    if errors:
        (out_dir / "errors.json").write_text(
            json.dumps(errors, indent=2, sort_keys=True) + "\n")
    return parsed_path
