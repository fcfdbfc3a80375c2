"""Boundary admission: the fixed, fail-closed decision pipeline and its log.

``AdmissionVerifier.decide`` never raises for bad input and never calls the
registry, an envelope store, or the network. Everything it needs arrives
as an argument: the presented artifacts, an anchor snapshot, an envelope
status snapshot, the replay cache and the clock value.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ._encoding import canonical_json, loads_strict, sha256_b64url
from .envelopes import EnvelopeStatus
from .errors import ConfigError, ProofError, TokenError
from .policy import ExecutionTuple, PolicyArtifact, check_prohibitions, covers
from .proofs import DEFAULT_IAT_WINDOW, ReplayCache, verify_proof
from .registry import TrustAnchorSet
from .tokens import parse_ect, verify_ect_signature

log = logging.getLogger(__name__)

ALLOW, DENY = "ALLOW", "DENY"
REASON_CODES = (
    "ok",
    "malformed_artifact",
    "anchor_unknown",
    "signature_invalid",
    "expired",
    "not_yet_valid",
    "audience_mismatch",
    "pop_signature_invalid",
    "holder_binding_mismatch",
    "htm_mismatch",
    "htu_mismatch",
    "stale_proof",
    "ath_mismatch",
    "replay_detected",
    "envelope_inactive",
    "prohibited",
    "capability_miss",
)
DEFAULT_LEEWAY = 30


@dataclass(frozen=True)
class AdmissionRequest:
    ect_compact: str | None
    proof_compact: str | None
    execution: ExecutionTuple | None
    method: str
    uri: str
    received_at: int


@dataclass(frozen=True)
class AdmissionDecision:
    outcome: str
    reason: str
    matched_tuple_index: int | None
    ect_digest: str | None
    proof_digest: str | None
    issuer_thumbprint: str | None
    holder_thumbprint: str | None
    anchor_set_version: int
    policy_id: str | None
    envelope_id: str | None
    evaluated_at: int
    decision_digest: str = field(default="")

    def body(self) -> dict[str, Any]:
        out = asdict(self)
        del out["decision_digest"]
        return out

    def compute_digest(self) -> str:
        return sha256_b64url(canonical_json(self.body()))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def allowed(self) -> bool:
        return self.outcome == ALLOW


_DECISION_FIELDS = tuple(AdmissionDecision.__dataclass_fields__)


def _finish(**fields: Any) -> AdmissionDecision:
    d = AdmissionDecision(**fields)
    return AdmissionDecision(**{**fields, "decision_digest": d.compute_digest()})


def _digest_or_none(value: Any) -> str | None:
    return sha256_b64url(value) if isinstance(value, str) else None


class AdmissionVerifier:
    """Decision function configured for one service boundary.

    ``service_audience`` must equal the policy's caveat audience; anything
    else is a startup configuration error.
    """

    def __init__(
        self,
        policy: PolicyArtifact,
        service_audience: str,
        *,
        leeway: int = DEFAULT_LEEWAY,
        iat_window: int = DEFAULT_IAT_WINDOW,
        strict_envelope: bool = False,
        nonce: str | None = None,
    ) -> None:
        if service_audience != policy.caveats.audience:
            raise ConfigError(
                "config_error", f"service audience {service_audience!r} != policy audience {policy.caveats.audience!r}"
            )
        self.policy = policy
        self.audience = service_audience
        self.leeway = leeway
        self.iat_window = iat_window
        self.strict_envelope = strict_envelope
        self.nonce = nonce

    def decide(
        self,
        req: AdmissionRequest,
        anchors: TrustAnchorSet,
        envelopes: Mapping[str, EnvelopeStatus],
        cache: ReplayCache,
        now: int,
    ) -> AdmissionDecision:
        state: dict[str, Any] = {
            "matched_tuple_index": None,
            "ect_digest": _digest_or_none(req.ect_compact),
            "proof_digest": _digest_or_none(req.proof_compact),
            "issuer_thumbprint": None,
            "holder_thumbprint": None,
            "anchor_set_version": anchors.version,
            "policy_id": None,
            "envelope_id": req.execution.envelope_id if isinstance(req.execution, ExecutionTuple) else None,
            "evaluated_at": now,
        }
        try:
            reason = self._pipeline(req, anchors, envelopes, cache, now, state)
        except Exception:  # fail closed; nothing escapes the boundary
            log.exception("admission pipeline crashed")
            reason = "malformed_artifact"
            state["matched_tuple_index"] = None
        if reason != "ok":
            state["matched_tuple_index"] = None
        return _finish(outcome=ALLOW if reason == "ok" else DENY, reason=reason, **state)

    def _pipeline(self, req, anchors, envelopes, cache, now, state) -> str:
        execution = req.execution
        # 1. parse the token
        if not isinstance(execution, ExecutionTuple) or not isinstance(req.ect_compact, str):
            return "malformed_artifact"
        try:
            token = parse_ect(req.ect_compact)
        except TokenError:
            return "malformed_artifact"
        state["policy_id"] = token.policy_id
        # 2. issuer signature under an active anchor
        try:
            state["issuer_thumbprint"] = verify_ect_signature(token, anchors)
        except TokenError as exc:
            return exc.code
        # 3. temporal validity
        if now > token.exp + self.leeway:
            return "expired"
        if now < token.nbf - self.leeway:
            return "not_yet_valid"
        # 4. audience
        if token.aud != self.audience:
            return "audience_mismatch"
        # 5. possession proof; the replay cache is only touched in here
        if not isinstance(req.proof_compact, str):
            return "malformed_artifact"
        try:
            state["holder_thumbprint"] = verify_proof(
                req.proof_compact,
                req.method,
                req.uri,
                token,
                cache,
                now,
                iat_window=self.iat_window,
                expected_nonce=self.nonce,
            )
        except ProofError as exc:
            return "malformed_artifact" if exc.code == "malformed_proof" else exc.code
        # 6. envelope activity
        status = envelopes.get(execution.envelope_id)
        if status is None or not status.active_at(now):
            return "envelope_inactive"
        # 7. prohibitions
        if not check_prohibitions(self.policy.caveats, execution):
            return "prohibited"
        # 8. coverage
        if self.strict_envelope and token.claims.get("envelope_scope") != execution.envelope_id:
            return "capability_miss"
        for index, tup in enumerate(token.tuples):
            if token.delegation_depth <= tup.delegation_limit and covers(tup, execution):
                state["matched_tuple_index"] = index
                return "ok"
        return "capability_miss"


def decision_from_dict(raw: Mapping[str, Any]) -> AdmissionDecision:
    return AdmissionDecision(**{k: raw[k] for k in _DECISION_FIELDS})


class DecisionLog:
    """Append-only JSON Lines decision log.

    Each line is the canonical decision record plus ``seq`` (1, 2, ...) and
    ``prev_digest`` (the previous record's ``decision_digest``). A sidecar
    ``<log>.head`` holds the latest seq and digest so that dropping whole
    lines from the tail is detectable too.
    """

    GENESIS = ""

    def __init__(self, path: str | Path, *, fsync: bool = False) -> None:
        self.path = Path(path)
        self._fsync = fsync
        self._lock = threading.Lock()
        self._seq = 0
        self._prev = self.GENESIS
        self.head_path = head_path(self.path)
        if self.path.exists():
            for line in self.path.read_bytes().splitlines():
                if line.strip():
                    rec = loads_strict(line)
                    self._seq, self._prev = rec["seq"], rec["decision_digest"]

    def append(self, decision: AdmissionDecision) -> int:
        if decision.decision_digest != decision.compute_digest():
            raise ValueError("decision_digest does not match record")
        with self._lock:
            seq = self._seq + 1
            line = canonical_json({**decision.to_dict(), "seq": seq, "prev_digest": self._prev})
            try:
                with open(self.path, "ab") as fh:
                    fh.write(line + b"\n")
                    fh.flush()
                    if self._fsync:
                        os.fsync(fh.fileno())
                tmp = self.head_path.with_name(self.head_path.name + ".tmp")
                tmp.write_bytes(canonical_json({"seq": seq, "decision_digest": decision.decision_digest}) + b"\n")
                os.replace(tmp, self.head_path)
            except OSError as exc:
                raise OSError(f"storage_error: {exc}") from exc
            self._seq, self._prev = seq, decision.decision_digest
            return seq


def head_path(log_path: str | Path) -> Path:
    p = Path(log_path)
    return p.with_name(p.name + ".head")


def append_decision(log_: DecisionLog, decision: AdmissionDecision) -> int:
    return log_.append(decision)


@dataclass
class AuditReport:
    path: str
    records: int = 0
    problems: list[dict[str, Any]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.problems

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "records": self.records, "clean": self.clean, "problems": self.problems}


def audit_replay(path: str | Path, head: str | Path | None = None) -> AuditReport:
    """Re-verify every line of a decision log.

    Flags lines that fail to parse or are not in canonical form, digest
    mismatches, broken ``prev_digest`` links, sequence gaps, a final line
    without its newline, and a tail that disagrees with the head file
    (``<log>.head`` unless given; skipped when absent).
    """
    data = Path(path).read_bytes()
    report = AuditReport(str(path))
    head_file = Path(head) if head is not None else head_path(path)
    expected_head = None
    if head_file.exists():
        try:
            expected_head = loads_strict(head_file.read_bytes())
        except (ValueError, UnicodeDecodeError):
            report.problems.append({"line": 0, "issue": "head_unreadable"})
    last = _audit_lines(data, report)
    if expected_head is not None and isinstance(expected_head, dict):
        got = (last or {}).get("seq"), (last or {}).get("decision_digest")
        if got != (expected_head.get("seq"), expected_head.get("decision_digest")):
            issue = f"truncated: head is seq {expected_head.get('seq')}"
            report.problems.append({"line": report.records, "issue": issue})
    return report


def _audit_lines(data: bytes, report: AuditReport) -> dict[str, Any] | None:
    """Check every line; return the last parseable record."""
    last = None
    if not data:
        return last
    lines = data.split(b"\n")
    truncated = lines[-1] != b""
    if not truncated:
        lines = lines[:-1]
    expected_seq, prev = 1, DecisionLog.GENESIS

    def flag(lineno: int, issue: str) -> None:
        report.problems.append({"line": lineno, "issue": issue})

    for lineno, line in enumerate(lines, start=1):
        if truncated and lineno == len(lines):
            flag(lineno, "truncated")
            break
        try:
            rec = loads_strict(line)
            if not isinstance(rec, dict):
                raise ValueError("not an object")
        except (ValueError, UnicodeDecodeError):
            flag(lineno, "unparseable")
            expected_seq += 1
            prev = None
            continue
        report.records += 1
        if set(rec) != set(_DECISION_FIELDS) | {"seq", "prev_digest"}:
            flag(lineno, "field_set")
        elif canonical_json(rec) != line:
            flag(lineno, "non_canonical")
        else:
            try:
                recomputed = decision_from_dict(rec).compute_digest()
            except (TypeError, ValueError):
                recomputed = None
            if recomputed != rec["decision_digest"]:
                flag(lineno, "digest_mismatch")
            if prev is not None and rec["prev_digest"] != prev:
                flag(lineno, "chain_break")
        seq = rec.get("seq")
        if seq != expected_seq:
            flag(lineno, f"sequence_gap: expected {expected_seq}, got {seq}")
        expected_seq = (seq + 1) if isinstance(seq, int) and not isinstance(seq, bool) else expected_seq + 1
        prev = rec.get("decision_digest")
        last = rec
    return last
