"""Corpus, embedding and configuration files.

Corpus files hold one JSON object per line::

    {"id": "q1", "text": "...", "positive": "...", "negatives": ["...", "..."]}

``positive`` and ``negatives`` are only needed for contrastive training.
Embedding files hold ``{"id": ..., "values": [...]}`` per line; floats are
written with Python's shortest round-trip repr, so reading them back gives
bit-identical arrays.

Configuration files are flat ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class CorpusRecord:
    id: str
    text: str
    positive: str | None = None
    negatives: list[str] | None = None


def _malformed(path: Path, lineno: int, why: str) -> ValueError:
    return ValueError(f"{path}:{lineno}: malformed record ({why})")


def load_corpus(path) -> list[CorpusRecord]:
    """Records in file order; blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    records: list[CorpusRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _malformed(path, lineno, exc.msg) from exc
            if not isinstance(obj, dict):
                raise _malformed(path, lineno, "expected an object")
            if not isinstance(obj.get("id"), (str, int)) or not isinstance(obj.get("text"), str):
                raise _malformed(path, lineno, "needs string fields 'id' and 'text'")
            positive = obj.get("positive")
            negatives = obj.get("negatives")
            if positive is not None and not isinstance(positive, str):
                raise _malformed(path, lineno, "'positive' must be a string")
            if negatives is not None and (not isinstance(negatives, list)
                                          or not all(isinstance(n, str) for n in negatives)):
                raise _malformed(path, lineno, "'negatives' must be a list of strings")
            rid = str(obj["id"])
            if rid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            records.append(CorpusRecord(rid, obj["text"], positive, negatives))
    return records


def write_corpus(path, records: Sequence[CorpusRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": rec.id, "text": rec.text}
            if rec.positive is not None:
                obj["positive"] = rec.positive
            if rec.negatives is not None:
                obj["negatives"] = rec.negatives
            fh.write(json.dumps(obj) + "\n")


def format_embeddings(ids: Sequence[str], values: np.ndarray) -> str:
    values = np.asarray(values)
    if values.ndim != 2 or len(ids) != values.shape[0]:
        raise ValueError(f"need one row per id, got {len(ids)} ids and shape {values.shape}")
    return "".join(json.dumps({"id": rid, "values": [float(v) for v in row]}) + "\n"
                   for rid, row in zip(ids, values.astype(np.float64)))


def write_embeddings(path, ids: Sequence[str], values: np.ndarray) -> None:
    Path(path).write_text(format_embeddings(ids, values), encoding="utf-8")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                ids.append(obj["id"])
                rows.append(obj["values"])
    return ids, np.asarray(rows, dtype=np.float64)


def _parse_value(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def load_config(path) -> dict:
    """Parse a flat ``key = value`` file; numbers and booleans are converted."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key] = _parse_value(raw)
    return out
