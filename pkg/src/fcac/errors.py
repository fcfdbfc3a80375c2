"""Exception types. Every error carries a stable machine-readable ``code``."""

from __future__ import annotations


class FcacError(Exception):
    code = "error"

    def __init__(self, code: str | None = None, detail: str = "") -> None:
        if code is not None:
            self.code = code
        self.detail = detail
        super().__init__(f"{self.code}: {detail}" if detail else self.code)


class PolicyError(FcacError):
    code = "schema_error"


class RegistryError(FcacError):
    code = "malformed_key"


class TokenError(FcacError):
    code = "malformed_token"


class ProofError(FcacError):
    code = "malformed_proof"


class EnvelopeError(FcacError):
    code = "envelope_error"


class ConfigError(FcacError):
    code = "config_error"
