"""Sovereignty envelopes: k-of-n bind, verification codes, claims, approvals.

State machine::

    Draft -> PendingApprovals -> Active -> Expired

An envelope reaches Active at exactly its k-th distinct approval. Nothing
ever moves backwards. All mutations go through one lock and are appended to
an optional JSONL event log that is replayed on reopen.
"""

from __future__ import annotations

import random
import secrets
import threading
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from ._encoding import canonical_json, loads_strict
from .errors import EnvelopeError
from .identity import EdgeIdentity

DRAFT, PENDING, ACTIVE, EXPIRED = "Draft", "PendingApprovals", "Active", "Expired"
ISSUED, CLAIMED, CONSUMED, SESSION_EXPIRED = "Issued", "Claimed", "Consumed", "Expired"

CODE_TTL = 600
DEFAULT_VALIDITY = 30 * 24 * 3600
_STATE_ORDER = {DRAFT: 0, PENDING: 1, ACTIVE: 2, EXPIRED: 3}


@dataclass(frozen=True)
class Envelope:
    envelope_id: str
    participants: tuple[str, ...]
    quorum_k: int
    quorum_n: int
    state: str
    approvals: frozenset[str]
    nbf: int
    exp: int
    created_by: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "envelope_id": self.envelope_id,
            "participants": list(self.participants),
            "quorum_k": self.quorum_k,
            "quorum_n": self.quorum_n,
            "state": self.state,
            "approvals": sorted(self.approvals),
            "nbf": self.nbf,
            "exp": self.exp,
            "created_by": self.created_by,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Envelope":
        return cls(
            envelope_id=raw["envelope_id"],
            participants=tuple(raw["participants"]),
            quorum_k=raw["quorum_k"],
            quorum_n=raw["quorum_n"],
            state=raw["state"],
            approvals=frozenset(raw["approvals"]),
            nbf=raw["nbf"],
            exp=raw["exp"],
            created_by=raw["created_by"],
        )


@dataclass(frozen=True)
class VerificationSession:
    session_id: str
    envelope_id: str
    participant: str
    code: str
    state: str
    issued_at: int
    ttl: int = CODE_TTL

    def expired_at(self, now: int) -> bool:
        return now >= self.issued_at + self.ttl

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "envelope_id": self.envelope_id,
            "participant": self.participant,
            "code": self.code,
            "state": self.state,
            "issued_at": self.issued_at,
            "ttl": self.ttl,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "VerificationSession":
        return cls(**raw)


@dataclass(frozen=True)
class EnvelopeStatus:
    envelope_id: str
    state: str
    nbf: int
    exp: int

    def active_at(self, now: int) -> bool:
        return self.state == ACTIVE and self.nbf <= now <= self.exp


EnvelopeStatusView = Mapping[str, EnvelopeStatus]


def _time_state(env: Envelope, now: int) -> str:
    if now > env.exp:
        return EXPIRED
    if env.state == ACTIVE and now < env.nbf:
        # quorum met but the window has not opened yet
        return PENDING
    return env.state


class EnvelopeBook:
    def __init__(
        self,
        log_path: str | Path | None = None,
        *,
        rng: random.Random | None = None,
        code_ttl: int = CODE_TTL,
        default_validity: int = DEFAULT_VALIDITY,
    ) -> None:
        self._lock = threading.RLock()
        self._rng = rng
        self.code_ttl = code_ttl
        self.default_validity = default_validity
        self._envelopes: dict[str, Envelope] = {}
        self._sessions: dict[str, VerificationSession] = {}
        self._log_path = Path(log_path) if log_path is not None else None
        self._seq = 0
        if self._log_path is not None and self._log_path.exists():
            self._replay(self._log_path)

    # persistence

    def _replay(self, path: Path) -> None:
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = loads_strict(line)
            for raw in event["envelopes"]:
                env = Envelope.from_dict(raw)
                self._envelopes[env.envelope_id] = env
            for raw in event["sessions"]:
                sess = VerificationSession.from_dict(raw)
                self._sessions[sess.session_id] = sess
            self._seq = event["seq"]

    def _commit(
        self, kind: str, envelopes: Iterable[Envelope] = (), sessions: Iterable[VerificationSession] = ()
    ) -> None:
        envelopes, sessions = list(envelopes), list(sessions)
        for env in envelopes:
            old = self._envelopes.get(env.envelope_id)
            if old is not None and _STATE_ORDER[env.state] < _STATE_ORDER[old.state]:
                raise AssertionError(f"envelope state regression {old.state} -> {env.state}")
        self._seq += 1
        if self._log_path is not None:
            line = canonical_json(
                {
                    "seq": self._seq,
                    "type": kind,
                    "envelopes": [e.to_dict() for e in envelopes],
                    "sessions": [s.to_dict() for s in sessions],
                }
            )
            with open(self._log_path, "ab") as fh:
                fh.write(line + b"\n")
        for env in envelopes:
            self._envelopes[env.envelope_id] = env
        for sess in sessions:
            self._sessions[sess.session_id] = sess

    # randomness

    def _uuid(self) -> str:
        if self._rng is None:
            return str(uuid.uuid4())
        return str(uuid.UUID(int=self._rng.getrandbits(128), version=4))

    def _fresh_code(self, now: int) -> str:
        live = {s.code for s in self._sessions.values() if s.state in (ISSUED, CLAIMED) and not s.expired_at(now)}
        while True:
            n = self._rng.randrange(10**6) if self._rng is not None else secrets.randbelow(10**6)
            code = f"{n:06d}"
            if code not in live:
                return code

    # commands

    def bind_init(
        self,
        caller: EdgeIdentity,
        participants: Iterable[str],
        k: int,
        n: int,
        now: int,
        validity: tuple[int, int] | None = None,
    ) -> Envelope:
        if not caller.is_hub:
            raise EnvelopeError("identity_not_hub", "bind_init is hub-only")
        participants = tuple(participants)
        if not participants or len(set(participants)) != len(participants):
            raise EnvelopeError("bad_quorum", "participants must be distinct and non-empty")
        if not all(isinstance(p, str) and p for p in participants):
            raise EnvelopeError("bad_quorum", "participants must be org ids")
        for v in (k, n):
            if isinstance(v, bool) or not isinstance(v, int):
                raise EnvelopeError("bad_quorum", "k and n must be integers")
        if not (1 <= k <= n == len(participants)):
            raise EnvelopeError("bad_quorum", f"need 1 <= k <= n = |participants|, got k={k} n={n}")
        nbf, exp = validity if validity is not None else (now, now + self.default_validity)
        if not (isinstance(nbf, int) and isinstance(exp, int) and nbf < exp):
            raise EnvelopeError("bad_validity", "need nbf < exp")
        with self._lock:
            env = Envelope(
                envelope_id=self._uuid(),
                participants=participants,
                quorum_k=k,
                quorum_n=n,
                state=DRAFT,
                approvals=frozenset(),
                nbf=nbf,
                exp=exp,
                created_by=caller.subject_dn,
            )
            sessions = []
            for p in participants:
                sess = VerificationSession(
                    session_id=self._uuid(),
                    envelope_id=env.envelope_id,
                    participant=p,
                    code=self._fresh_code(now),
                    state=ISSUED,
                    issued_at=now,
                    ttl=self.code_ttl,
                )
                # keep codes distinct within one bind as well
                self._sessions[sess.session_id] = sess
                sessions.append(sess)
            self._commit("draft", [env])
            env = replace(env, state=PENDING)
            self._commit("bind_init", [env], sessions)
            return env

    def verify_start(self, caller: EdgeIdentity, now: int, envelope_id: str | None = None) -> VerificationSession:
        """Return the code an org admin's device should display.

        Without ``envelope_id`` the most recently issued pending session wins.
        """
        if not caller.is_org_admin:
            raise EnvelopeError("identity_not_admin", "verify-start is admin-only")
        with self._lock:
            pending = [
                s
                for s in self._sessions.values()
                if s.participant == caller.org_id
                and s.state == ISSUED
                and not s.expired_at(now)
                and self._envelopes[s.envelope_id].state == PENDING
                and envelope_id in (None, s.envelope_id)
            ]
            if not pending:
                raise EnvelopeError("no_pending_session", f"nothing to verify for {caller.org_id!r}")
            # dicts keep insertion order, so the last maximum is the newest
            return max(reversed(pending), key=lambda s: s.issued_at)

    def session_claim(self, caller: EdgeIdentity, code: str, now: int) -> VerificationSession:
        if not caller.is_hub:
            raise EnvelopeError("identity_not_hub", "session claim is hub-only")
        with self._lock:
            matches = [s for s in self._sessions.values() if s.code == code]
            if not matches:
                raise EnvelopeError("invalid_code", "unknown code")
            sess = max(matches, key=lambda s: s.issued_at)
            if sess.state in (CLAIMED, CONSUMED):
                raise EnvelopeError("already_claimed", "code has been used")
            if sess.state != ISSUED or sess.expired_at(now):
                if sess.state == ISSUED:
                    self._commit("session_expired", sessions=[replace(sess, state=SESSION_EXPIRED)])
                raise EnvelopeError("invalid_code", "code expired")
            sess = replace(sess, state=CLAIMED)
            self._commit("claim", sessions=[sess])
            return sess

    def bind_approve(self, caller: EdgeIdentity, session_id: str, now: int) -> Envelope:
        if not caller.is_hub:
            raise EnvelopeError("identity_not_hub", "bind approve is hub-only")
        with self._lock:
            sess = self._sessions.get(session_id)
            if sess is None:
                raise EnvelopeError("session_not_claimed", "unknown session")
            if sess.state == CONSUMED:
                raise EnvelopeError("duplicate_approval", f"{sess.participant} already approved")
            if sess.state != CLAIMED:
                raise EnvelopeError("session_not_claimed", f"session is {sess.state}")
            env = self._envelopes[sess.envelope_id]
            if sess.participant in env.approvals:
                raise EnvelopeError("duplicate_approval", f"{sess.participant} already approved")
            if env.state != PENDING or now > env.exp:
                raise EnvelopeError("envelope_not_pending", f"envelope is {_time_state(env, now)}")
            approvals = env.approvals | {sess.participant}
            state = ACTIVE if len(approvals) >= env.quorum_k else PENDING
            env = replace(env, approvals=approvals, state=state)
            self._commit("approve", [env], [replace(sess, state=CONSUMED)])
            return env

    # reads

    def get(self, envelope_id: str) -> Envelope:
        with self._lock:
            env = self._envelopes.get(envelope_id)
        if env is None:
            raise EnvelopeError("unknown_envelope", envelope_id)
        return env

    def sessions_for(self, envelope_id: str) -> list[VerificationSession]:
        with self._lock:
            return sorted(
                (s for s in self._sessions.values() if s.envelope_id == envelope_id), key=lambda s: s.participant
            )

    def envelope_status(self, envelope_id: str, now: int) -> EnvelopeStatus:
        """Active only with quorum met and ``now`` inside [nbf, exp]."""
        with self._lock:
            env = self.get(envelope_id)
            state = _time_state(env, now)
            if state == EXPIRED and env.state != EXPIRED:
                self._commit("expire", [replace(env, state=EXPIRED)])
            return EnvelopeStatus(env.envelope_id, state, env.nbf, env.exp)

    def status_view(self, now: int) -> EnvelopeStatusView:
        """Immutable snapshot handed to the admission verifier."""
        with self._lock:
            return MappingProxyType(
                {eid: EnvelopeStatus(eid, _time_state(env, now), env.nbf, env.exp) for eid, env in self._envelopes.items()}
            )
