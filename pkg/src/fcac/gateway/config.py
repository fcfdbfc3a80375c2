"""Gateway configuration file (JSON). ``FCAC_CONFIG`` overrides the path."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..identity import HUB, MEMBER, ORG_ADMIN

NATIVE, FORWARDED = "native_mtls", "forwarded"
_PATH_FIELDS = (
    "policy_path",
    "anchors_path",
    "anchors_signature_path",
    "anchors_signer_jwk_path",
    "keystore",
    "vault_root",
    "decision_log",
    "envelope_log",
    "tls_cert",
    "tls_key",
    "tls_client_ca",
)


@dataclass
class GatewayConfig:
    service_audience: str
    policy_path: Path
    anchors_path: Path
    keystore: Path
    vault_root: Path
    decision_log: Path
    envelope_log: Path | None = None
    anchors_signature_path: Path | None = None
    anchors_signer_jwk_path: Path | None = None
    tls_cert: Path | None = None
    tls_key: Path | None = None
    tls_client_ca: Path | None = None
    host: str = "127.0.0.1"
    port: int = 8443
    server_name: str = "verifier.local"
    public_base_url: str | None = None
    mode: str = NATIVE
    trusted_edges: list[str] = field(default_factory=lambda: ["127.0.0.1"])
    # subject DN -> {"role": hub|org_admin|member, "org_id": ...}
    identities: dict[str, dict[str, str]] = field(default_factory=dict)
    replay_window: int = 300
    iat_window: int = 300
    skew_leeway: int = 30
    admission_nonce: str | None = None
    odd_plus_allowlist: list[int] = field(default_factory=lambda: [0])
    strict_envelope: bool = False
    code_ttl: int = 600
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in (NATIVE, FORWARDED):
            raise ConfigError("config_error", f"mode must be {NATIVE!r} or {FORWARDED!r}")
        for dn, ident in self.identities.items():
            if ident.get("role") not in (HUB, ORG_ADMIN, MEMBER):
                raise ConfigError("config_error", f"identity {dn!r} has unsupported role {ident.get('role')!r}")
            if ident["role"] == ORG_ADMIN and not ident.get("org_id"):
                raise ConfigError("config_error", f"org_admin identity {dn!r} needs org_id")

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: Path | None = None) -> "GatewayConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError("config_error", f"unknown config keys {sorted(unknown)}")
        values = dict(raw)
        for name in _PATH_FIELDS:
            if values.get(name) is not None:
                p = Path(values[name])
                values[name] = p if p.is_absolute() or base_dir is None else base_dir / p
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError("config_error", str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = str(value) if isinstance(value, Path) else value
        return out


def load_config(path: str | Path | None = None) -> GatewayConfig:
    env = os.environ.get("FCAC_CONFIG")
    chosen = Path(env) if env else (Path(path) if path is not None else None)
    if chosen is None:
        raise ConfigError("config_error", "no config path given and FCAC_CONFIG unset")
    try:
        raw = json.loads(chosen.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError("config_error", f"cannot read {chosen}: {exc}") from exc
    return GatewayConfig.from_dict(raw, base_dir=chosen.parent)
