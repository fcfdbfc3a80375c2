"""Canonical JSON, base64url and digest helpers shared by every artifact."""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import re
from typing import Any

_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]*$")


def _reject_floats(obj: Any) -> None:
    if isinstance(obj, float):
        raise TypeError("floats are not allowed in canonical JSON")
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError("canonical JSON keys must be strings")
            _reject_floats(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _reject_floats(v)


def canonical_json(obj: Any) -> bytes:
    """Sorted keys, no insignificant whitespace, UTF-8, no floats."""
    _reject_floats(obj)
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url decode; raises ValueError on anything else."""
    if not isinstance(text, str) or not _B64URL_RE.match(text) or len(text) % 4 == 1:
        raise ValueError("invalid base64url")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as exc:
        raise ValueError("invalid base64url") from exc
    # non-canonical trailing bits would let two encodings name the same bytes
    if b64url_encode(raw) != text:
        raise ValueError("non-canonical base64url")
    return raw


def sha256_b64url(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return b64url_encode(hashlib.sha256(data).digest())


def digest_of(obj: Any) -> str:
    return sha256_b64url(canonical_json(obj))


def loads_strict(data: bytes | str) -> Any:
    """json.loads that rejects duplicate object keys and floats."""

    def _pairs(pairs):
        out = {}
        for k, v in pairs:
            if k in out:
                raise ValueError(f"duplicate key {k!r}")
            out[k] = v
        return out

    def _no_float(s):
        raise ValueError("floats are not allowed")

    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(
        data,
        object_pairs_hook=_pairs,
        parse_float=_no_float,
        parse_constant=_no_float,
    )
