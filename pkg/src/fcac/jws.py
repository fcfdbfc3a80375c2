"""Compact JWS (three base64url segments) with EdDSA only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ._encoding import b64url_decode, b64url_encode, canonical_json, loads_strict

ALLOWED_ALGS = frozenset({"EdDSA"})


class MalformedJWS(ValueError):
    pass


@dataclass(frozen=True)
class CompactJWS:
    header: dict[str, Any]
    payload: dict[str, Any]
    signature: bytes
    signing_input: bytes
    compact: str


def sign_compact(header: dict[str, Any], payload: dict[str, Any], key: Ed25519PrivateKey) -> str:
    signing_input = (b64url_encode(canonical_json(header)) + "." + b64url_encode(canonical_json(payload))).encode(
        "ascii"
    )
    return signing_input.decode("ascii") + "." + b64url_encode(key.sign(signing_input))


def split_compact(compact: Any) -> CompactJWS:
    """Structural decode. Raises MalformedJWS; never verifies anything."""
    if not isinstance(compact, str):
        raise MalformedJWS("not a string")
    parts = compact.split(".")
    if len(parts) != 3:
        raise MalformedJWS(f"expected 3 segments, got {len(parts)}")
    try:
        header = loads_strict(b64url_decode(parts[0]))
        payload = loads_strict(b64url_decode(parts[1]))
        signature = b64url_decode(parts[2])
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedJWS(str(exc)) from exc
    if not isinstance(header, dict) or not isinstance(payload, dict):
        raise MalformedJWS("header and payload must be JSON objects")
    if header.get("alg") not in ALLOWED_ALGS:
        raise MalformedJWS(f"alg {header.get('alg')!r} not allowed")
    if "crit" in header:
        # no critical extensions are understood
        raise MalformedJWS("unsupported crit header")
    if len(signature) != 64:
        raise MalformedJWS("EdDSA signature must be 64 bytes")
    return CompactJWS(header, payload, signature, f"{parts[0]}.{parts[1]}".encode("ascii"), compact)
