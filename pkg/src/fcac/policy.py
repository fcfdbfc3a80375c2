"""Policy artifact model and the deterministic capability-tuple compiler.

The policy artifact (``policy.json``) is the shared vocabulary between the
issuer and the boundary verifier. Only its constitutional subset (ops,
profiles, caveats) is compiled; anything under the reserved ``procedural``
key is carried through untouched for backend logic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from ._encoding import canonical_json, loads_strict, sha256_b64url
from .errors import PolicyError

QUALIFIERS = frozenset({"cohort", "purpose", "agg", "pii", "contact"})

_SEMVER_RE = re.compile(r"^\d+\.\d+(\.\d+)?$")
_TOP_LEVEL = {"policy_version", "ops", "cap_profiles", "cap_profiles_default", "caveats", "meta", "procedural"}

Scalar = str | bool


def _check_scalar(value: Any, where: str) -> Scalar:
    if isinstance(value, bool) or (isinstance(value, str) and value != ""):
        return value
    raise PolicyError("schema_error", f"{where}: qualifier values must be non-empty strings or booleans")


def _value_key(value: Scalar) -> tuple[int, str]:
    # bools sort before strings; never compare a bool with a str directly
    return (0, "true" if value else "false") if isinstance(value, bool) else (1, value)


def _norm_identifier(value: Any, where: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise PolicyError("schema_error", f"{where} must be a non-empty string")
    return value


def _norm_action(value: Any, where: str) -> str:
    return _norm_identifier(value, where).lower()


def _check_qualifier_names(names: Iterable[str], where: str) -> None:
    for name in names:
        if name not in QUALIFIERS:
            raise PolicyError("unknown_qualifier", f"{where}: {name!r}")


def _value_set(raw: Any, where: str) -> tuple[Scalar, ...]:
    values = raw if isinstance(raw, list) else [raw]
    if not values:
        raise PolicyError("schema_error", f"{where}: empty value-set")
    checked = {_value_key(_check_scalar(v, where)): v for v in values}
    return tuple(checked[k] for k in sorted(checked))


def _scope_sets(raw: Any, where: str) -> Mapping[str, tuple[Scalar, ...]]:
    if not isinstance(raw, dict):
        raise PolicyError("schema_error", f"{where}: scope must be an object")
    _check_qualifier_names(raw, where)
    return MappingProxyType({k: _value_set(raw[k], f"{where}.{k}") for k in sorted(raw)})


def _matches(scope: Mapping[str, tuple[Scalar, ...]], qualifiers: Mapping[str, Scalar]) -> bool:
    for name, allowed in scope.items():
        if name not in qualifiers:
            return False
        got = qualifiers[name]
        if not any(type(got) is type(v) and got == v for v in allowed):
            return False
    return True


@dataclass(frozen=True)
class OperationSpec:
    op_id: str
    resource: str
    action: str
    scope: Mapping[str, Scalar] = field(default_factory=dict)
    output_class: str | None = None
    delegation_limit: int = 0

    @classmethod
    def from_dict(cls, raw: Any) -> "OperationSpec":
        if not isinstance(raw, dict):
            raise PolicyError("schema_error", "op must be an object")
        op_id = _norm_identifier(raw.get("op_id"), "op_id")
        where = f"ops[{op_id}]"
        known = {"op_id", "resource", "action", "scope", "output_class", "delegation_limit"}
        if set(raw) - known:
            raise PolicyError("schema_error", f"{where}: unknown fields {sorted(set(raw) - known)}")
        scope = raw.get("scope", {})
        if not isinstance(scope, dict):
            raise PolicyError("schema_error", f"{where}.scope must be an object")
        _check_qualifier_names(scope, where)
        limit = raw.get("delegation_limit", 0)
        if isinstance(limit, bool) or not isinstance(limit, int) or limit < 0:
            raise PolicyError("schema_error", f"{where}.delegation_limit must be a non-negative integer")
        output_class = raw.get("output_class")
        if output_class is not None:
            _norm_identifier(output_class, f"{where}.output_class")
        return cls(
            op_id=op_id,
            resource=_norm_identifier(raw.get("resource"), f"{where}.resource"),
            action=_norm_action(raw.get("action"), f"{where}.action"),
            scope=MappingProxyType({k: _check_scalar(scope[k], f"{where}.scope.{k}") for k in sorted(scope)}),
            output_class=output_class,
            delegation_limit=limit,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "op_id": self.op_id,
            "resource": self.resource,
            "action": self.action,
            "scope": dict(self.scope),
        }
        if self.output_class is not None:
            out["output_class"] = self.output_class
        if self.delegation_limit:
            out["delegation_limit"] = self.delegation_limit
        return out


@dataclass(frozen=True)
class ProhibitionPattern:
    """Deny pattern; matched with the same rules as tuple coverage."""

    resource: str
    action: str
    scope: Mapping[str, tuple[Scalar, ...]] = field(default_factory=dict)
    audience: str | None = None

    @classmethod
    def from_dict(cls, raw: Any) -> "ProhibitionPattern":
        if not isinstance(raw, dict):
            raise PolicyError("schema_error", "prohibition must be an object")
        if set(raw) - {"resource", "action", "qualifiers", "audience"}:
            raise PolicyError("schema_error", "prohibition has unknown fields")
        audience = raw.get("audience")
        if audience is not None:
            _norm_identifier(audience, "prohibition.audience")
        return cls(
            resource=_norm_identifier(raw.get("resource"), "prohibition.resource"),
            action=_norm_action(raw.get("action"), "prohibition.action"),
            scope=_scope_sets(raw.get("qualifiers", {}), "prohibition.qualifiers"),
            audience=audience,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "resource": self.resource,
            "action": self.action,
            "qualifiers": {k: list(v) for k, v in self.scope.items()},
        }
        if self.audience is not None:
            out["audience"] = self.audience
        return out

    def matches(self, request: "ExecutionTuple") -> bool:
        if (self.resource, self.action) != (request.resource, request.action):
            return False
        if self.audience is not None and self.audience != request.audience:
            return False
        return _matches(self.scope, request.qualifiers)


@dataclass(frozen=True)
class GlobalCaveats:
    audience: str
    prohibitions: tuple[ProhibitionPattern, ...] = ()

    @classmethod
    def from_dict(cls, raw: Any) -> "GlobalCaveats":
        if not isinstance(raw, dict):
            raise PolicyError("schema_error", "caveats must be an object")
        prohibitions = raw.get("prohibitions", [])
        if not isinstance(prohibitions, list):
            raise PolicyError("schema_error", "caveats.prohibitions must be a list")
        return cls(
            audience=_norm_identifier(raw.get("audience"), "caveats.audience"),
            prohibitions=tuple(ProhibitionPattern.from_dict(p) for p in prohibitions),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"audience": self.audience, "prohibitions": [p.to_dict() for p in self.prohibitions]}


@dataclass(frozen=True)
class PolicyMeta:
    policy_id: str
    manifest_id: str = ""
    notes: str = ""

    @classmethod
    def from_dict(cls, raw: Any) -> "PolicyMeta":
        if not isinstance(raw, dict):
            raise PolicyError("schema_error", "meta must be an object")
        manifest_id = raw.get("manifest_id", "")
        notes = raw.get("notes", "")
        if not isinstance(manifest_id, str) or not isinstance(notes, str):
            raise PolicyError("schema_error", "meta.manifest_id and meta.notes must be strings")
        return cls(_norm_identifier(raw.get("policy_id"), "meta.policy_id"), manifest_id, notes)

    def to_dict(self) -> dict[str, Any]:
        return {"policy_id": self.policy_id, "manifest_id": self.manifest_id, "notes": self.notes}


@dataclass(frozen=True)
class ExecutionTuple:
    """A concrete request projected onto the tuple vocabulary."""

    resource: str
    action: str
    qualifiers: Mapping[str, Scalar]
    audience: str
    envelope_id: str = ""

    def __post_init__(self) -> None:
        for name in ("resource", "action", "audience"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise PolicyError("schema_error", f"execution.{name} must be a non-empty string")
        object.__setattr__(self, "action", self.action.lower())
        object.__setattr__(self, "qualifiers", MappingProxyType(dict(sorted(dict(self.qualifiers).items()))))

    @classmethod
    def from_dict(cls, raw: Any, default_audience: str | None = None) -> "ExecutionTuple":
        if not isinstance(raw, dict):
            raise PolicyError("schema_error", "execution must be an object")
        qualifiers = raw.get("qualifiers", {})
        if not isinstance(qualifiers, dict):
            raise PolicyError("schema_error", "execution.qualifiers must be an object")
        for k, v in qualifiers.items():
            _check_scalar(v, f"execution.qualifiers.{k}")
        envelope_id = raw.get("envelope_id", "")
        if not isinstance(envelope_id, str):
            raise PolicyError("schema_error", "execution.envelope_id must be a string")
        return cls(
            resource=raw.get("resource"),
            action=raw.get("action"),
            qualifiers=qualifiers,
            audience=raw.get("audience", default_audience),
            envelope_id=envelope_id,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "resource": self.resource,
            "action": self.action,
            "qualifiers": dict(self.qualifiers),
            "audience": self.audience,
            "envelope_id": self.envelope_id,
        }


@dataclass(frozen=True)
class CapabilityTuple:
    resource: str
    action: str
    scope: Mapping[str, tuple[Scalar, ...]]
    audience: str
    output_class: str | None = None
    delegation_limit: int = 0
    inherits_prohibitions: bool = True

    def to_dict(self) -> dict[str, Any]:
        caveats: dict[str, Any] = {
            "audience": self.audience,
            "delegation_limit": self.delegation_limit,
            "prohibitions": "inherited" if self.inherits_prohibitions else "none",
            "validity": "token",
        }
        if self.output_class is not None:
            caveats["output_class"] = self.output_class
        return {
            "resource": self.resource,
            "action": self.action,
            "scope": {k: list(v) for k, v in self.scope.items()},
            "caveats": caveats,
        }

    @classmethod
    def from_dict(cls, raw: Any) -> "CapabilityTuple":
        if not isinstance(raw, dict) or set(raw) != {"resource", "action", "scope", "caveats"}:
            raise PolicyError("schema_error", "tuple must have exactly resource, action, scope, caveats")
        caveats = raw["caveats"]
        if not isinstance(caveats, dict):
            raise PolicyError("schema_error", "tuple caveats must be an object")
        limit = caveats.get("delegation_limit", 0)
        if isinstance(limit, bool) or not isinstance(limit, int) or limit < 0:
            raise PolicyError("schema_error", "tuple delegation_limit must be a non-negative integer")
        if caveats.get("prohibitions", "inherited") not in ("inherited", "none"):
            raise PolicyError("schema_error", "tuple prohibitions flag must be 'inherited' or 'none'")
        return cls(
            resource=_norm_identifier(raw["resource"], "tuple.resource"),
            action=_norm_action(raw["action"], "tuple.action"),
            scope=_scope_sets(raw["scope"], "tuple.scope"),
            audience=_norm_identifier(caveats.get("audience"), "tuple.caveats.audience"),
            output_class=caveats.get("output_class"),
            delegation_limit=limit,
            inherits_prohibitions=caveats.get("prohibitions", "inherited") == "inherited",
        )

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    def sort_key(self) -> tuple[str, str, bytes]:
        return (self.resource, self.action, canonical_json(self.to_dict()["scope"]))


@dataclass(frozen=True)
class PolicyArtifact:
    policy_version: str
    ops: tuple[OperationSpec, ...]
    cap_profiles: Mapping[str, tuple[str, ...]]
    cap_profiles_default: Mapping[str, tuple[str, ...]]
    caveats: GlobalCaveats
    meta: PolicyMeta
    procedural: Mapping[str, Any] | None = None

    @property
    def ops_by_id(self) -> dict[str, OperationSpec]:
        return {op.op_id: op for op in self.ops}

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "policy_version": self.policy_version,
            "ops": [op.to_dict() for op in self.ops],
            "cap_profiles": {k: list(v) for k, v in self.cap_profiles.items()},
            "cap_profiles_default": {k: list(v) for k, v in self.cap_profiles_default.items()},
            "caveats": self.caveats.to_dict(),
            "meta": self.meta.to_dict(),
        }
        if self.procedural is not None:
            out["procedural"] = dict(self.procedural)
        return out

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @property
    def digest(self) -> str:
        return sha256_b64url(self.canonical_bytes())


def _string_list(raw: Any, where: str) -> tuple[str, ...]:
    if not isinstance(raw, list) or not all(isinstance(x, str) and x for x in raw):
        raise PolicyError("schema_error", f"{where} must be a list of non-empty strings")
    if len(set(raw)) != len(raw):
        raise PolicyError("schema_error", f"{where} has duplicate entries")
    return tuple(raw)


def parse_policy(raw: Any) -> PolicyArtifact:
    """Validate an already-decoded policy document."""
    if not isinstance(raw, dict):
        raise PolicyError("schema_error", "policy must be a JSON object")
    unknown = set(raw) - _TOP_LEVEL
    if unknown:
        raise PolicyError("schema_error", f"unknown top-level fields {sorted(unknown)}")
    version = raw.get("policy_version")
    if not isinstance(version, str) or not _SEMVER_RE.match(version):
        raise PolicyError("schema_error", "policy_version is mandatory and must look like '1.1'")

    raw_ops = raw.get("ops")
    if not isinstance(raw_ops, list) or not raw_ops:
        raise PolicyError("schema_error", "ops must be a non-empty list")
    ops = tuple(OperationSpec.from_dict(o) for o in raw_ops)
    op_ids = [op.op_id for op in ops]
    if len(set(op_ids)) != len(op_ids):
        raise PolicyError("schema_error", "duplicate op_id")

    raw_profiles = raw.get("cap_profiles")
    if not isinstance(raw_profiles, dict) or not raw_profiles:
        raise PolicyError("schema_error", "cap_profiles must be a non-empty object")
    profiles = {name: _string_list(refs, f"cap_profiles[{name}]") for name, refs in raw_profiles.items()}
    for name, refs in profiles.items():
        for ref in refs:
            if ref not in op_ids:
                raise PolicyError("dangling_ref", f"profile {name!r} references unknown op {ref!r}")

    raw_defaults = raw.get("cap_profiles_default", {})
    if not isinstance(raw_defaults, dict):
        raise PolicyError("schema_error", "cap_profiles_default must be an object")
    defaults = {role: _string_list(refs, f"cap_profiles_default[{role}]") for role, refs in raw_defaults.items()}
    for role, refs in defaults.items():
        for ref in refs:
            if ref not in profiles:
                raise PolicyError("dangling_ref", f"role {role!r} references unknown profile {ref!r}")

    procedural = raw.get("procedural")
    if procedural is not None and not isinstance(procedural, dict):
        raise PolicyError("schema_error", "procedural must be an object")

    return PolicyArtifact(
        policy_version=version,
        ops=ops,
        cap_profiles=MappingProxyType(profiles),
        cap_profiles_default=MappingProxyType(defaults),
        caveats=GlobalCaveats.from_dict(raw.get("caveats")),
        meta=PolicyMeta.from_dict(raw.get("meta")),
        procedural=MappingProxyType(procedural) if procedural is not None else None,
    )


def load_policy(data: bytes | str) -> PolicyArtifact:
    """Parse and validate ``policy.json`` bytes."""
    try:
        raw = loads_strict(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise PolicyError("schema_error", f"not valid policy JSON: {exc}") from exc
    return parse_policy(raw)


def compile_tuples(policy: PolicyArtifact, profiles: Iterable[str]) -> list[CapabilityTuple]:
    """Compile granted profiles into the sorted, deduplicated tuple list.

    Each op becomes exactly one tuple whose scope holds singleton value-sets
    and whose caveats inherit the policy audience. Takes no clock, store or
    network; the same inputs always produce the same canonical bytes.
    """
    ops = policy.ops_by_id
    seen: dict[bytes, CapabilityTuple] = {}
    for name in profiles:
        if name not in policy.cap_profiles:
            raise PolicyError("unknown_profile", name)
        for op_id in policy.cap_profiles[name]:
            op = ops[op_id]
            tup = CapabilityTuple(
                resource=op.resource,
                action=op.action,
                scope=MappingProxyType({k: (v,) for k, v in op.scope.items()}),
                audience=policy.caveats.audience,
                output_class=op.output_class,
                delegation_limit=op.delegation_limit,
            )
            seen.setdefault(tup.canonical_bytes(), tup)
    return sorted(seen.values(), key=CapabilityTuple.sort_key)


def covers(tup: CapabilityTuple, request: ExecutionTuple) -> bool:
    """True iff the tuple admits the request.

    Qualifiers absent from the tuple are unconstrained; extra request
    qualifiers never block coverage.
    """
    return (
        tup.resource == request.resource
        and tup.action == request.action
        and tup.audience == request.audience
        and _matches(tup.scope, request.qualifiers)
    )


def check_prohibitions(caveats: GlobalCaveats, request: ExecutionTuple) -> bool:
    """True iff no prohibition pattern matches. Deny wins over any allow."""
    return not any(p.matches(request) for p in caveats.prohibitions)


def tuples_digest(tuples: Iterable[CapabilityTuple]) -> str:
    return sha256_b64url(canonical_json([t.to_dict() for t in tuples]))
