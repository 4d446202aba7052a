"""Canonical JSON, content hashing and atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

from .errors import ParseError


def canonical_json(obj) -> bytes:
    """Serialize with sorted keys and no insignificant whitespace.

    Floats use Python's shortest round-trip repr, so decoding recovers the
    exact 64-bit values.  NaN and Inf are rejected.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def pretty_json(obj) -> bytes:
    """Deterministic indented JSON for human-facing reports."""
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def parse_json(payload: bytes | str, what: str = "payload"):
    try:
        return json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed JSON in {what}: {exc}") from exc


def sha256_hex(*chunks: bytes) -> str:
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()


def file_sha256(path: str | os.PathLike) -> str:
    return sha256_hex(Path(path).read_bytes())


def atomic_write(path: str | os.PathLike, payload: bytes) -> Path:
    """Write to a temporary sibling then rename over the target."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target
