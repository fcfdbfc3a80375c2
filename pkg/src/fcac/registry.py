"""Organizational key roots, the federation trust registry and anchor snapshots.

Verifiers never talk to the registry on the request path. They hold an
immutable :class:`TrustAnchorSet` (usually imported from an exported anchor
file) and cite its version in every decision.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from ._encoding import b64url_decode, b64url_encode, canonical_json, loads_strict, sha256_b64url
from .errors import RegistryError

# RFC 7638 required members per key type
THUMBPRINT_MEMBERS = {
    "RSA": ("e", "kty", "n"),
    "EC": ("crv", "kty", "x", "y"),
    "OKP": ("crv", "kty", "x"),
    "oct": ("k", "kty"),
}
PRIVATE_MEMBERS = frozenset({"d", "p", "q", "dp", "dq", "qi", "oth", "k"})

ACTIVE, ROTATED, REVOKED = "active", "rotated", "revoked"


def jwk_thumbprint(jwk: Mapping[str, Any]) -> str:
    """SHA-256 JWK thumbprint, base64url without padding."""
    if not isinstance(jwk, Mapping):
        raise RegistryError("malformed_key", "JWK must be an object")
    members = THUMBPRINT_MEMBERS.get(jwk.get("kty"))  # type: ignore[arg-type]
    if members is None:
        raise RegistryError("malformed_key", f"unsupported kty {jwk.get('kty')!r}")
    required = {}
    for name in members:
        value = jwk.get(name)
        if not isinstance(value, str) or not value:
            raise RegistryError("malformed_key", f"missing member {name!r}")
        required[name] = value
    return b64url_encode(hashlib.sha256(canonical_json(required)).digest())


def public_jwk(key: Ed25519PublicKey | Ed25519PrivateKey) -> dict[str, str]:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    raw = key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return {"kty": "OKP", "crv": "Ed25519", "x": b64url_encode(raw)}


def ed25519_public_key(jwk: Mapping[str, Any]) -> Ed25519PublicKey:
    """Decode an Ed25519 public JWK. Private members are refused."""
    if not isinstance(jwk, Mapping):
        raise RegistryError("malformed_key", "JWK must be an object")
    if jwk.get("kty") != "OKP" or jwk.get("crv") != "Ed25519":
        raise RegistryError("malformed_key", "only OKP/Ed25519 keys are accepted")
    if PRIVATE_MEMBERS & set(jwk):
        raise RegistryError("malformed_key", "JWK carries private key material")
    try:
        raw = b64url_decode(jwk.get("x"))  # type: ignore[arg-type]
    except ValueError as exc:
        raise RegistryError("malformed_key", "x is not base64url") from exc
    if len(raw) != 32:
        raise RegistryError("malformed_key", "Ed25519 x must be 32 bytes")
    return Ed25519PublicKey.from_public_bytes(raw)


def verify_ed25519(jwk: Mapping[str, Any], signature: bytes, data: bytes) -> bool:
    try:
        ed25519_public_key(jwk).verify(signature, data)
    except (InvalidSignature, RegistryError):
        return False
    return True


@dataclass(frozen=True)
class OrgKeyRecord:
    org_id: str
    public_key: Mapping[str, str]
    thumbprint: str
    not_before: int
    not_after: int
    status: str = ACTIVE
    role: str = "issuer"
    metadata: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "org_id": self.org_id,
            "role": self.role,
            "public_key": dict(self.public_key),
            "thumbprint": self.thumbprint,
            "status": self.status,
            "not_before": self.not_before,
            "not_after": self.not_after,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "OrgKeyRecord":
        try:
            rec = cls(
                org_id=raw["org_id"],
                role=raw.get("role", "issuer"),
                public_key=MappingProxyType(dict(raw["public_key"])),
                thumbprint=raw["thumbprint"],
                status=raw["status"],
                not_before=raw["not_before"],
                not_after=raw["not_after"],
                metadata=MappingProxyType(dict(raw.get("metadata", {}))),
            )
        except (KeyError, TypeError) as exc:
            raise RegistryError("malformed_anchor_set", f"bad record: {exc}") from exc
        ed25519_public_key(rec.public_key)
        if jwk_thumbprint(rec.public_key) != rec.thumbprint:
            raise RegistryError("malformed_anchor_set", "thumbprint does not match key")
        if rec.status not in (ACTIVE, ROTATED, REVOKED):
            raise RegistryError("malformed_anchor_set", f"bad status {rec.status!r}")
        return rec


@dataclass(frozen=True)
class TrustAnchorSet:
    """Immutable, content-addressed snapshot of registered anchors."""

    version: int
    anchors: Mapping[str, OrgKeyRecord]
    snapshot_digest: str

    @classmethod
    def build(cls, version: int, records: Mapping[str, OrgKeyRecord]) -> "TrustAnchorSet":
        anchors = MappingProxyType(dict(sorted(records.items())))
        return cls(version, anchors, _anchor_digest(version, anchors))

    def active(self, thumbprint: str) -> OrgKeyRecord | None:
        rec = self.anchors.get(thumbprint)
        return rec if rec is not None and rec.status == ACTIVE else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "anchors": [r.to_dict() for r in self.anchors.values()],
            "snapshot_digest": self.snapshot_digest,
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrustAnchorSet":
        try:
            raw = loads_strict(data)
            version = raw["version"]
            records = [OrgKeyRecord.from_dict(r) for r in raw["anchors"]]
            claimed = raw["snapshot_digest"]
        except (ValueError, KeyError, TypeError) as exc:
            raise RegistryError("malformed_anchor_set", str(exc)) from exc
        snap = cls.build(version, {r.thumbprint: r for r in records})
        if snap.snapshot_digest != claimed:
            raise RegistryError("malformed_anchor_set", "snapshot_digest mismatch")
        return snap


def _anchor_digest(version: int, anchors: Mapping[str, OrgKeyRecord]) -> str:
    return sha256_b64url(canonical_json({"version": version, "anchors": [r.to_dict() for r in anchors.values()]}))


def sign_anchor_file(data: bytes, key: Ed25519PrivateKey) -> str:
    return b64url_encode(key.sign(data))


def load_anchor_file(
    path: str | Path, signature_path: str | Path | None = None, signer_jwk: Mapping[str, Any] | None = None
) -> TrustAnchorSet:
    """Import an exported anchor set, checking the detached signature if given."""
    data = Path(path).read_bytes()
    if signature_path is not None:
        if signer_jwk is None:
            raise RegistryError("malformed_anchor_set", "signature given without a signer key")
        try:
            sig = b64url_decode(Path(signature_path).read_text().strip())
        except ValueError as exc:
            raise RegistryError("anchor_signature_invalid", "signature is not base64url") from exc
        if not verify_ed25519(signer_jwk, sig, data):
            raise RegistryError("anchor_signature_invalid", str(path))
    return TrustAnchorSet.from_bytes(data)


class TrustRegistry:
    """Single-writer registry backed by an optional append-only JSONL log.

    Each mutation appends one line ``{"version": v, "records": [...]}`` with
    the records it changed; reopening the log replays those lines.
    """

    def __init__(self, log_path: str | Path | None = None) -> None:
        self._lock = threading.Lock()
        self._records: dict[str, OrgKeyRecord] = {}
        self._version = 0
        self._log_path = Path(log_path) if log_path is not None else None
        if self._log_path is not None and self._log_path.exists():
            for line in self._log_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                entry = loads_strict(line)
                for raw in entry["records"]:
                    rec = OrgKeyRecord.from_dict(raw)
                    self._records[rec.thumbprint] = rec
                self._version = entry["version"]

    @property
    def version(self) -> int:
        return self._version

    def _commit(self, changed: list[OrgKeyRecord]) -> None:
        version = self._version + 1
        if self._log_path is not None:
            line = canonical_json({"version": version, "records": [r.to_dict() for r in changed]})
            with open(self._log_path, "ab") as fh:
                fh.write(line + b"\n")
                fh.flush()
                os.fsync(fh.fileno())
        for rec in changed:
            self._records[rec.thumbprint] = rec
        self._version = version

    def _active_for(self, org_id: str, role: str) -> OrgKeyRecord | None:
        for rec in self._records.values():
            if rec.org_id == org_id and rec.role == role and rec.status == ACTIVE:
                return rec
        return None

    def _new_record(self, org_id, public_key, validity, role, metadata) -> OrgKeyRecord:
        ed25519_public_key(public_key)
        not_before, not_after = validity
        if not (isinstance(not_before, int) and isinstance(not_after, int) and not_before < not_after):
            raise RegistryError("bad_validity", "not_before must be < not_after")
        thumb = jwk_thumbprint(public_key)
        if thumb in self._records:
            raise RegistryError("duplicate_active_key", "key already registered")
        return OrgKeyRecord(
            org_id=org_id,
            role=role,
            public_key=MappingProxyType(public_jwk(ed25519_public_key(public_key))),
            thumbprint=thumb,
            not_before=not_before,
            not_after=not_after,
            metadata=MappingProxyType(dict(metadata or {})),
        )

    def register_org(
        self,
        org_id: str,
        public_key: Mapping[str, Any],
        validity: tuple[int, int],
        *,
        role: str = "issuer",
        edge_org: str | None = None,
        metadata: Mapping[str, str] | None = None,
    ) -> OrgKeyRecord:
        """Record a key whose control was demonstrated at the mTLS edge.

        ``edge_org`` is the org identity established by the edge; when given
        it must equal ``org_id``.
        """
        if edge_org is not None and edge_org != org_id:
            raise RegistryError("identity_mismatch", f"edge identity {edge_org!r} cannot register {org_id!r}")
        with self._lock:
            if self._active_for(org_id, role) is not None:
                raise RegistryError("duplicate_active_key", f"{org_id}/{role} already has an active key")
            rec = self._new_record(org_id, public_key, validity, role, metadata)
            self._commit([rec])
            return rec

    def rotate_key(
        self,
        org_id: str,
        new_key: Mapping[str, Any],
        *,
        role: str = "issuer",
        validity: tuple[int, int] | None = None,
    ) -> TrustAnchorSet:
        with self._lock:
            old = self._active_for(org_id, role)
            if old is None:
                raise RegistryError("unknown_org", f"no active {role} key for {org_id!r}")
            new = self._new_record(
                org_id, new_key, validity or (old.not_before, old.not_after), role, old.metadata
            )
            self._commit([replace(old, status=ROTATED), new])
            return self._snapshot()

    def revoke_key(self, thumbprint: str) -> TrustAnchorSet:
        with self._lock:
            rec = self._records.get(thumbprint)
            if rec is None:
                raise RegistryError("unknown_key", thumbprint)
            self._commit([replace(rec, status=REVOKED)])
            return self._snapshot()

    def _snapshot(self) -> TrustAnchorSet:
        return TrustAnchorSet.build(self._version, self._records)

    def snapshot_anchors(self) -> TrustAnchorSet:
        with self._lock:
            return self._snapshot()


class Keystore:
    """File-backed key storage standing in for vault/enclave-held keys.

    Each key ``name`` is three files: ``name.key`` (PKCS#8 PEM, mode 0600),
    ``name.jwk.json`` and ``name.jkt`` (the thumbprint).
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def paths(self, name: str) -> tuple[Path, Path, Path]:
        return (self.root / f"{name}.key", self.root / f"{name}.jwk.json", self.root / f"{name}.jkt")

    def generate(self, name: str, *, force: bool = False) -> tuple[Ed25519PrivateKey, dict[str, str], str]:
        return self.store(name, Ed25519PrivateKey.generate(), force=force)

    def store(self, name: str, key: Ed25519PrivateKey, *, force: bool = False):
        key_path, jwk_path, jkt_path = self.paths(name)
        if not force and any(p.exists() for p in (key_path, jwk_path, jkt_path)):
            raise FileExistsError(f"key {name!r} already exists in {self.root}")
        self.root.mkdir(parents=True, exist_ok=True, mode=0o700)
        pem = key.private_bytes(
            serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
        )
        fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(pem)
        os.chmod(key_path, 0o600)
        jwk = public_jwk(key)
        thumb = jwk_thumbprint(jwk)
        jwk_path.write_text(json.dumps(jwk, indent=2, sort_keys=True) + "\n")
        jkt_path.write_text(thumb + "\n")
        return key, jwk, thumb

    def load_private(self, name: str) -> Ed25519PrivateKey:
        return load_private_key(self.paths(name)[0])

    def load_jwk(self, name: str) -> dict[str, Any]:
        return json.loads(self.paths(name)[1].read_text())


def load_private_key(path: str | Path) -> Ed25519PrivateKey:
    key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise RegistryError("malformed_key", f"{path} is not an Ed25519 key")
    return key
