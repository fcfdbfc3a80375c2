"""Per-request proof of possession (DPoP-style) and the replay cache."""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from typing import Any, Mapping
from urllib.parse import urlsplit, urlunsplit

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ._encoding import sha256_b64url
from .errors import ProofError, RegistryError
from .jws import MalformedJWS, sign_compact, split_compact
from .registry import ed25519_public_key, jwk_thumbprint, public_jwk
from .tokens import EnvelopeCapabilityToken, new_jti

PROOF_TYP = "dpop+jwt"
DEFAULT_IAT_WINDOW = 300
_DEFAULT_PORTS = {"http": 80, "https": 443}


def normalize_htu(uri: str) -> str:
    """Scheme and host lowercased, default port dropped, query and fragment removed."""
    try:
        parts = urlsplit(uri)
        port = parts.port
    except (ValueError, TypeError, AttributeError) as exc:
        raise ProofError("malformed_uri", str(uri)) from exc
    scheme = parts.scheme.lower()
    if scheme not in _DEFAULT_PORTS or not parts.hostname:
        raise ProofError("malformed_uri", str(uri))
    host = parts.hostname.lower()
    if ":" in host:
        host = f"[{host}]"
    if port is not None and port != _DEFAULT_PORTS[scheme]:
        host = f"{host}:{port}"
    return urlunsplit((scheme, host, parts.path or "/", "", ""))


@dataclass(frozen=True)
class PossessionProof:
    header: dict[str, Any]
    claims: dict[str, Any]
    compact: str

    @property
    def jti(self) -> str:
        return self.claims["jti"]


def build_proof(
    holder_key: Ed25519PrivateKey,
    method: str,
    uri: str,
    ect_compact: str,
    now: int,
    nonce: str | None = None,
    *,
    jti: str | None = None,
    rng: random.Random | None = None,
) -> PossessionProof:
    header = {"alg": "EdDSA", "typ": PROOF_TYP, "jwk": public_jwk(holder_key)}
    claims: dict[str, Any] = {
        "htm": method.upper(),
        "htu": normalize_htu(uri),
        "iat": now,
        "jti": jti or new_jti(rng),
        "ath": sha256_b64url(ect_compact),
    }
    if nonce is not None:
        claims["nonce"] = nonce
    return PossessionProof(header, claims, sign_compact(header, claims, holder_key))


class ReplayCache:
    """Per-verifier set of seen proof ids.

    An id is kept until ``max(iat, now) + window``, which outlasts the
    proof's own acceptance window.
    """

    def __init__(self, window: int = DEFAULT_IAT_WINDOW) -> None:
        self.window = window
        self._entries: dict[str, int] = {}
        self._lock = threading.Lock()

    def insert_if_absent(self, jti: str, iat: int, now: int) -> bool:
        with self._lock:
            if len(self._entries) > 1024:
                self._entries = {k: v for k, v in self._entries.items() if v >= now}
            expiry = self._entries.get(jti)
            if expiry is not None and expiry >= now:
                return False
            self._entries[jti] = max(iat, now) + self.window
            return True

    def __len__(self) -> int:
        return len(self._entries)


def verify_proof(
    proof_compact: Any,
    expected_method: str,
    expected_uri: str,
    ect: EnvelopeCapabilityToken,
    cache: ReplayCache,
    now: int,
    *,
    iat_window: int = DEFAULT_IAT_WINDOW,
    expected_nonce: str | None = None,
) -> str:
    """Verify possession of the ECT's holder key for this exact request.

    Checks run in a fixed order so the failure code is reproducible; the
    replay cache is touched only when every other check has passed.
    Returns the holder thumbprint.
    """
    try:
        jws = split_compact(proof_compact)
    except MalformedJWS as exc:
        raise ProofError("malformed_proof", str(exc)) from exc
    header, claims = jws.header, jws.payload
    if header.get("typ") != PROOF_TYP:
        raise ProofError("malformed_proof", f"typ must be {PROOF_TYP!r}")
    jwk = header.get("jwk")
    try:
        key = ed25519_public_key(jwk)
        holder = jwk_thumbprint(jwk)
    except RegistryError as exc:
        raise ProofError("malformed_proof", f"header jwk: {exc.detail}") from exc
    for name in ("htm", "htu", "jti", "ath"):
        if not isinstance(claims.get(name), str) or not claims[name]:
            raise ProofError("malformed_proof", f"claim {name!r} missing")
    if isinstance(claims.get("iat"), bool) or not isinstance(claims.get("iat"), int):
        raise ProofError("malformed_proof", "iat must be an integer")

    try:
        key.verify(jws.signature, jws.signing_input)
    except InvalidSignature as exc:
        raise ProofError("pop_signature_invalid", "proof signature does not verify") from exc
    if holder != ect.jkt:
        raise ProofError("holder_binding_mismatch", "proof key is not the key bound in cnf.jkt")
    if claims["htm"] != expected_method.upper():
        raise ProofError("htm_mismatch", f"{claims['htm']} != {expected_method.upper()}")
    try:
        htu_ok = claims["htu"] == normalize_htu(expected_uri)
    except ProofError:
        htu_ok = False
    if not htu_ok:
        raise ProofError("htu_mismatch", claims["htu"])
    if abs(now - claims["iat"]) > iat_window:
        raise ProofError("stale_proof", f"iat {claims['iat']} outside +/-{iat_window}s of {now}")
    if expected_nonce is not None and claims.get("nonce") != expected_nonce:
        raise ProofError("stale_proof", "missing or wrong server nonce")
    if claims["ath"] != sha256_b64url(ect.compact):
        raise ProofError("ath_mismatch", "proof is bound to a different token")
    if not cache.insert_if_absent(claims["jti"], claims["iat"], now):
        raise ProofError("replay_detected", claims["jti"])
    return holder


def proof_claims(proof_compact: str) -> Mapping[str, Any]:
    return split_compact(proof_compact).payload
