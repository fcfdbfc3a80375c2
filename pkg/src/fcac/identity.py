"""Caller identities as established at the mTLS edge."""

from __future__ import annotations

from dataclasses import dataclass

HUB, ORG_ADMIN, MEMBER, INTERNAL = "hub", "org_admin", "member", "internal"
NATIVE_MTLS, FORWARDED_HEADER, INTERNAL_DISPATCH = "native_mtls", "forwarded_header", "internal_dispatch"


@dataclass(frozen=True)
class EdgeIdentity:
    subject_dn: str
    role: str
    org_id: str | None = None
    source: str = NATIVE_MTLS

    @property
    def is_hub(self) -> bool:
        return self.role == HUB

    @property
    def is_org_admin(self) -> bool:
        return self.role == ORG_ADMIN and bool(self.org_id)
