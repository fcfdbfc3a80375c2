"""Envelope Capability Tokens: minting, compact parsing, issuer verification."""

from __future__ import annotations

import random
import secrets
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from cryptography.exceptions import InvalidSignature

from ._encoding import b64url_encode
from .errors import PolicyError, RegistryError, TokenError
from .jws import MalformedJWS, sign_compact, split_compact
from .policy import CapabilityTuple, PolicyArtifact, compile_tuples, tuples_digest
from .registry import Keystore, TrustAnchorSet, ed25519_public_key, jwk_thumbprint, public_jwk

ECT_TYP = "ect+jwt"
_REQUIRED_INT_CLAIMS = ("iat", "nbf", "exp")
_REQUIRED_STR_CLAIMS = ("iss", "sub", "aud", "jti", "policy_id")


def new_jti(rng: random.Random | None = None) -> str:
    """128-bit random identifier; ``rng`` makes it reproducible in tests."""
    raw = rng.randbytes(16) if rng is not None else secrets.token_bytes(16)
    return b64url_encode(raw)


@dataclass(frozen=True)
class MintRequest:
    issuer_key_handle: str
    holder_jwk: Mapping[str, Any]
    profiles: Sequence[str]
    validity: tuple[int, int]
    subject: str
    audience: str | None = None
    # recorded, never matched unless the verifier runs in strict envelope mode
    envelope_scope: str | None = None
    delegation_depth: int = 0


@dataclass(frozen=True)
class EnvelopeCapabilityToken:
    """A structurally decoded ECT. ``verified`` is always False here:
    signature and temporal checks belong to the admission verifier."""

    header: dict[str, Any]
    claims: dict[str, Any]
    signature: bytes
    signing_input: bytes
    compact: str
    tuples: tuple[CapabilityTuple, ...]
    verified: bool = field(default=False, compare=False)

    kid = property(lambda self: self.header["kid"])
    iss = property(lambda self: self.claims["iss"])
    sub = property(lambda self: self.claims["sub"])
    aud = property(lambda self: self.claims["aud"])
    iat = property(lambda self: self.claims["iat"])
    nbf = property(lambda self: self.claims["nbf"])
    exp = property(lambda self: self.claims["exp"])
    jti = property(lambda self: self.claims["jti"])
    policy_id = property(lambda self: self.claims["policy_id"])
    profiles = property(lambda self: tuple(self.claims["profiles"]))

    @property
    def jkt(self) -> str:
        return self.claims["cnf"]["jkt"]

    @property
    def delegation_depth(self) -> int:
        return self.claims.get("dlg_depth", 0)

    def serialize(self) -> str:
        return self.compact


def mint_ect(
    policy: PolicyArtifact,
    req: MintRequest,
    *,
    keystore: Keystore,
    anchors: TrustAnchorSet,
    now: int,
    jti: str | None = None,
    rng: random.Random | None = None,
) -> EnvelopeCapabilityToken:
    """Compile the granted profiles and sign them into a holder-bound ECT.

    Output is byte-identical for identical inputs once ``jti`` is fixed.
    """
    if not req.profiles:
        raise TokenError("empty_grant", "at least one profile must be granted")
    try:
        tuples = compile_tuples(policy, req.profiles)
    except PolicyError as exc:
        raise TokenError(exc.code, exc.detail) from exc
    if not tuples:
        raise TokenError("empty_grant", "granted profiles compile to no tuples")

    key = keystore.load_private(req.issuer_key_handle)
    kid = jwk_thumbprint(public_jwk(key))
    record = anchors.active(kid)
    if record is None:
        raise TokenError("issuer_key_inactive", f"issuer key {kid} is not an active anchor")
    nbf, exp = req.validity
    if not (nbf < exp and record.not_before <= nbf and exp <= record.not_after):
        raise TokenError("validity_out_of_range", "token validity must sit inside the issuer key validity")
    try:
        holder_jkt = jwk_thumbprint(req.holder_jwk)
        ed25519_public_key(req.holder_jwk)
    except RegistryError as exc:
        raise TokenError("malformed_key", f"holder key: {exc.detail}") from exc
    if req.delegation_depth < 0:
        raise TokenError("malformed_token", "delegation depth must be non-negative")

    header = {"alg": "EdDSA", "typ": ECT_TYP, "kid": kid}
    claims: dict[str, Any] = {
        "iss": record.org_id,
        "sub": req.subject,
        "aud": req.audience or policy.caveats.audience,
        "iat": now,
        "nbf": nbf,
        "exp": exp,
        "jti": jti or new_jti(rng),
        "cnf": {"jkt": holder_jkt},
        "tuples": [t.to_dict() for t in tuples],
        "policy_id": policy.meta.policy_id,
        "policy_digest": policy.digest,
        "profiles": list(req.profiles),
    }
    if req.envelope_scope is not None:
        claims["envelope_scope"] = req.envelope_scope
    if req.delegation_depth:
        claims["dlg_depth"] = req.delegation_depth
    return parse_ect(sign_compact(header, claims, key))


def parse_ect(compact: Any) -> EnvelopeCapabilityToken:
    """Structural decode only. Raises TokenError('malformed_token')."""
    try:
        jws = split_compact(compact)
    except MalformedJWS as exc:
        raise TokenError("malformed_token", str(exc)) from exc
    header, claims = jws.header, jws.payload
    if header.get("typ") != ECT_TYP:
        raise TokenError("malformed_token", f"typ must be {ECT_TYP!r}")
    if not isinstance(header.get("kid"), str) or not header["kid"]:
        raise TokenError("malformed_token", "kid missing")
    for name in _REQUIRED_STR_CLAIMS:
        if not isinstance(claims.get(name), str) or not claims[name]:
            raise TokenError("malformed_token", f"claim {name!r} missing")
    for name in _REQUIRED_INT_CLAIMS:
        if isinstance(claims.get(name), bool) or not isinstance(claims.get(name), int):
            raise TokenError("malformed_token", f"claim {name!r} must be an integer")
    if not (claims["nbf"] <= claims["exp"] and claims["iat"] <= claims["exp"]):
        raise TokenError("malformed_token", "inconsistent validity claims")
    cnf = claims.get("cnf")
    if not isinstance(cnf, dict) or not isinstance(cnf.get("jkt"), str) or not cnf["jkt"]:
        raise TokenError("malformed_token", "cnf.jkt missing: bearer ECTs are not accepted")
    profiles = claims.get("profiles")
    if not isinstance(profiles, list) or not all(isinstance(p, str) for p in profiles):
        raise TokenError("malformed_token", "profiles must be a list of strings")
    depth = claims.get("dlg_depth", 0)
    if isinstance(depth, bool) or not isinstance(depth, int) or depth < 0:
        raise TokenError("malformed_token", "dlg_depth must be a non-negative integer")
    raw_tuples = claims.get("tuples")
    if not isinstance(raw_tuples, list) or not raw_tuples:
        raise TokenError("malformed_token", "tuples must be a non-empty list")
    try:
        tuples = tuple(CapabilityTuple.from_dict(t) for t in raw_tuples)
    except PolicyError as exc:
        raise TokenError("malformed_token", f"bad tuple: {exc.detail}") from exc
    return EnvelopeCapabilityToken(header, claims, jws.signature, jws.signing_input, jws.compact, tuples)


def verify_ect_signature(token: EnvelopeCapabilityToken, anchors: TrustAnchorSet) -> str:
    """Check the issuer signature against an *active* anchor; return its thumbprint."""
    record = anchors.active(token.kid)
    if record is None or record.org_id != token.iss:
        raise TokenError("anchor_unknown", f"no active anchor {token.kid} for issuer {token.iss!r}")
    try:
        ed25519_public_key(record.public_key).verify(token.signature, token.signing_input)
    except InvalidSignature as exc:
        raise TokenError("signature_invalid", "ECT signature does not verify") from exc
    return record.thumbprint


def minted_tuples_digest(token: EnvelopeCapabilityToken) -> str:
    return tuples_digest(token.tuples)
