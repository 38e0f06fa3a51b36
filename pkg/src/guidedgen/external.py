"""Clients for the two external services: the LLM tuple extractor and a
generative knowledge base.

Both speak plain JSON-able requests through an injected ``transport``
callable.  A :class:`FixtureStore` sits between the client and the transport
so that recorded responses can be replayed without network access.  Replay is
keyed by the SHA-256 of the canonical request JSON.

Transport failures surface as :class:`TransportError` (retryable).  A
response that arrives but cannot be parsed raises
:class:`ExtractionParseError`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .errors import ExtractionParseError, ReplayMissError, TransportError

log = logging.getLogger(__name__)

FIXTURE_SCHEMA = "guidedgen.fixtures/1"
MODES = ("live", "record", "replay")


def request_key(request: dict) -> str:
    blob = json.dumps(request, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class FixtureStore:
    """Line-delimited store of ``{"key", "request", "response"}`` records.

    In ``replay`` mode the transport is never called.  ``record`` calls the
    transport on a miss and keeps the answer; :meth:`save` writes records
    sorted by key so the file is byte-stable across runs.
    """

    def __init__(self, path: str | Path | None = None, mode: str = "replay"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.path = Path(path) if path is not None else None
        self.mode = mode
        self.records: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            with open(self.path) as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        self.records[rec["key"]] = rec

    def fetch(self, request: dict, transport: Callable[[dict], Any] | None) -> Any:
        key = request_key(request)
        if self.mode != "live" and key in self.records:
            return self.records[key]["response"]
        if self.mode == "replay":
            raise ReplayMissError(f"no recorded response for request {key[:12]}")
        if transport is None:
            raise TransportError("no transport configured")
        try:
            response = transport(request)
        except TransportError:
            raise
        except (OSError, TimeoutError) as exc:
            raise TransportError(str(exc)) from exc
        if self.mode == "record":
            self.records[key] = {"key": key, "request": request, "response": response}
        return response

    def save(self, path: str | Path | None = None) -> None:
        path = Path(path) if path is not None else self.path
        if path is None:
            raise ValueError("no fixture path given")
        with open(path, "w") as f:
            for key in sorted(self.records):
                f.write(json.dumps(self.records[key], sort_keys=True, ensure_ascii=False) + "\n")


def extraction_prompt() -> str:
    """Instruction plus few-shot examples sent ahead of every target sentence."""
    return resources.files("guidedgen").joinpath("data/extraction_prompt.txt").read_text()


# label in the response -> RelationType value
RESPONSE_LABELS = {
    "IsUsedFor": "UsedFor",
    "UsedFor": "UsedFor",
    "AtLocation": "AtLocation",
    "CapableOf": "CapableOf",
    "PartOf": "PartOf",
}
_PAIR = re.compile(r"\(\s*([^(),]+?)\s*,\s*([^()]+?)\s*\)")


def build_extraction_request(sentence: str, prompt: str | None = None) -> dict:
    prompt = extraction_prompt() if prompt is None else prompt
    return {"prompt": prompt.rstrip("\n") + "\n\n" + sentence.strip() + "\n"}


def parse_extraction_response(text: str) -> list[tuple[str, str, str]]:
    """Parse the four labelled relation lines into (head, relation, tail) triples."""
    found: dict[str, list[tuple[str, str]]] = {}
    for line in text.splitlines():
        label, sep, body = line.partition(":")
        label = label.strip()
        if not sep or label not in RESPONSE_LABELS:
            continue
        relation = RESPONSE_LABELS[label]
        if relation in found:
            raise ExtractionParseError(f"relation {label} listed twice")
        body = body.strip()
        if body in ("None", ""):
            found[relation] = []
            continue
        pairs = _PAIR.findall(body)
        if not pairs:
            raise ExtractionParseError(f"cannot parse tuples from {body!r}")
        found[relation] = pairs
    missing = {"UsedFor", "AtLocation", "CapableOf", "PartOf"} - set(found)
    if missing:
        raise ExtractionParseError(f"response lacks relation lines: {sorted(missing)}")
    out = []
    for relation in ("UsedFor", "AtLocation", "CapableOf", "PartOf"):
        out.extend((h, relation, t) for h, t in found[relation])
    return out


def build_kb_request(head: str, relation: str, k: int) -> dict:
    return {"head": head, "relation": relation, "k": int(k)}


def parse_kb_response(response: Any, k: int) -> list[str]:
    if not isinstance(response, list) or not all(isinstance(t, str) for t in response):
        raise ExtractionParseError("knowledge-base response must be a list of strings")
    return response[:k]
