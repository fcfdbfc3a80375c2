"""Transport-neutral request dispatch for the federation gateway.

``Gateway.handle`` takes an already-authenticated :class:`EdgeIdentity` and
returns ``(status, json_body)``. The TLS server in ``server.py`` is a thin
shell around it; tests drive it directly.
"""

from __future__ import annotations

import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping
from urllib.parse import parse_qs

from .._encoding import loads_strict
from ..admission import AdmissionRequest, AdmissionVerifier, DecisionLog
from ..envelopes import ACTIVE, EnvelopeBook
from ..errors import ConfigError, EnvelopeError, FcacError, PolicyError
from ..identity import HUB, INTERNAL, INTERNAL_DISPATCH, MEMBER, ORG_ADMIN, EdgeIdentity
from ..policy import ExecutionTuple, PolicyArtifact, load_policy, tuples_digest
from ..proofs import ReplayCache
from ..registry import Keystore, TrustAnchorSet, load_anchor_file
from ..tokens import MintRequest, mint_ect
from .config import GatewayConfig

log = logging.getLogger(__name__)

ADMISSION_PATH = "/admission/check"
MAX_BODY = 1 << 20
_UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")

Handler = Callable[[EdgeIdentity, Mapping[str, str], Mapping[str, list[str]], Any], "tuple[int, dict]"]


@dataclass(frozen=True)
class Route:
    method: str
    path: str
    roles: frozenset[str]
    handler: Handler


class Router:
    """Route table where every entry must name the roles it admits."""

    def __init__(self) -> None:
        self._routes: dict[tuple[str, str], Route] = {}

    def add(self, method: str, path: str, roles: set[str] | frozenset[str], handler: Handler) -> None:
        if not roles:
            raise ValueError(f"route {method} {path} has no guard")
        self._routes[(method, path)] = Route(method, path, frozenset(roles), handler)

    def match(self, method: str, path: str) -> Route | None | bool:
        route = self._routes.get((method, path))
        if route is not None:
            return route
        return any(p == path for _, p in self._routes)

    def __iter__(self):
        return iter(self._routes.values())


def _guard_error(route: Route) -> str:
    if route.roles == {INTERNAL}:
        return "internal_route_violation"
    if route.roles == {HUB}:
        return "identity_not_hub"
    if route.roles == {ORG_ADMIN}:
        return "identity_not_admin"
    return "forbidden"


class AnchorSource:
    """Locally cached anchor snapshot, refreshed when the anchor file changes."""

    def __init__(self, path: Path | None = None, snapshot: TrustAnchorSet | None = None, **load_kw) -> None:
        self._path = path
        self._load_kw = load_kw
        self._mtime: int | None = None
        self._lock = threading.Lock()
        self._snapshot = snapshot
        if path is not None:
            self.refresh()
        if self._snapshot is None:
            raise ConfigError("config_error", "no trust anchors configured")

    def refresh(self) -> TrustAnchorSet:
        with self._lock:
            if self._path is not None:
                try:
                    mtime = self._path.stat().st_mtime_ns
                except OSError as exc:
                    if self._snapshot is None:
                        raise ConfigError("config_error", f"anchor file missing: {exc}") from exc
                    return self._snapshot
                if mtime != self._mtime:
                    self._snapshot = load_anchor_file(self._path, **self._load_kw)
                    self._mtime = mtime
            return self._snapshot

    def set(self, snapshot: TrustAnchorSet) -> None:
        with self._lock:
            self._snapshot = snapshot

    def current(self) -> TrustAnchorSet:
        return self.refresh()


class GuardedBackend:
    """Stand-in for the internal Core service behind the boundary.

    Predictions are an identity map digit -> label with cohort masking;
    readiness is the presence of ``vault/<envelope_id>/model.bin``.
    """

    MASKED = "masked"

    def __init__(self, vault_root: Path, odd_plus_allowlist: tuple[int, ...] = (0,)) -> None:
        self.vault_root = Path(vault_root)
        self.odd_plus_allowlist = frozenset(odd_plus_allowlist)
        self.calls = 0
        self._lock = threading.Lock()

    def model_path(self, envelope_id: str) -> Path:
        if not _UUID_RE.match(envelope_id):
            raise ValueError(f"bad envelope id {envelope_id!r}")
        return self.vault_root / envelope_id / "model.bin"

    def publish_model(self, envelope_id: str, blob: bytes = b"stub-model\n") -> Path:
        path = self.model_path(envelope_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        return path

    def is_ready(self, envelope_id: str) -> bool:
        try:
            return self.model_path(envelope_id).is_file()
        except ValueError:
            return False

    def allowed_labels(self, cohort: Any) -> frozenset[int]:
        evens = frozenset(range(0, 10, 2))
        odds = frozenset(range(1, 10, 2))
        if cohort == "EVEN_ONLY":
            return evens
        if cohort == "ODD_ONLY":
            return odds
        if cohort == "ODD_PLUS":
            return odds | self.odd_plus_allowlist
        return frozenset()

    def _count(self) -> None:
        with self._lock:
            self.calls += 1

    def predict(self, execution: ExecutionTuple, digit: int) -> dict[str, Any]:
        self._count()
        if not self.is_ready(execution.envelope_id):
            return {"status": "model_not_ready", "envelope_id": execution.envelope_id}
        label = digit  # stub classifier
        cohort = execution.qualifiers.get("cohort")
        shown: int | str = label if label in self.allowed_labels(cohort) else self.MASKED
        return {"status": "ok", "envelope_id": execution.envelope_id, "cohort": cohort, "label": shown}

    def execute(self, execution: ExecutionTuple) -> dict[str, Any]:
        self._count()
        return {"status": "accepted", "resource": execution.resource, "action": execution.action}


def _default_clock() -> int:
    return int(time.time())


class Gateway:
    def __init__(
        self,
        *,
        policy: PolicyArtifact,
        service_audience: str,
        anchors: AnchorSource,
        envelopes: EnvelopeBook,
        keystore: Keystore,
        backend: GuardedBackend,
        decision_log: DecisionLog,
        public_base_url: str,
        clock: Callable[[], int] = _default_clock,
        replay_window: int = 300,
        iat_window: int = 300,
        skew_leeway: int = 30,
        admission_nonce: str | None = None,
        strict_envelope: bool = False,
        rng: random.Random | None = None,
    ) -> None:
        self.policy = policy
        self.verifier = AdmissionVerifier(
            policy,
            service_audience,
            leeway=skew_leeway,
            iat_window=iat_window,
            strict_envelope=strict_envelope,
            nonce=admission_nonce,
        )
        self.anchors = anchors
        self.envelopes = envelopes
        self.keystore = keystore
        self.backend = backend
        self.decision_log = decision_log
        self.public_base_url = public_base_url.rstrip("/")
        self.clock = clock
        self.replay_cache = ReplayCache(replay_window)
        self.rng = rng
        self.allow_count = 0
        self._count_lock = threading.Lock()
        self.router = Router()
        self._internal = EdgeIdentity("gateway-internal-dispatch", INTERNAL, source=INTERNAL_DISPATCH)
        self._register_routes()

    @classmethod
    def from_config(cls, cfg: GatewayConfig, *, clock: Callable[[], int] = _default_clock, public_base_url=None):
        try:
            policy = load_policy(cfg.policy_path.read_bytes())
        except OSError as exc:
            raise ConfigError("config_error", f"cannot read policy: {exc}") from exc
        except PolicyError as exc:
            raise ConfigError("config_error", f"policy invalid: {exc}") from exc
        load_kw = {}
        if cfg.anchors_signature_path is not None:
            load_kw = {
                "signature_path": cfg.anchors_signature_path,
                "signer_jwk": json.loads(Path(cfg.anchors_signer_jwk_path).read_text()),
            }
        rng = random.Random(cfg.seed) if cfg.seed is not None else None
        return cls(
            policy=policy,
            service_audience=cfg.service_audience,
            anchors=AnchorSource(cfg.anchors_path, **load_kw),
            envelopes=EnvelopeBook(cfg.envelope_log, rng=rng, code_ttl=cfg.code_ttl),
            keystore=Keystore(cfg.keystore),
            backend=GuardedBackend(cfg.vault_root, tuple(cfg.odd_plus_allowlist)),
            decision_log=DecisionLog(cfg.decision_log),
            public_base_url=public_base_url or cfg.public_base_url or f"https://{cfg.server_name}:{cfg.port}",
            clock=clock,
            replay_window=cfg.replay_window,
            iat_window=cfg.iat_window,
            skew_leeway=cfg.skew_leeway,
            admission_nonce=cfg.admission_nonce,
            strict_envelope=cfg.strict_envelope,
            rng=rng,
        )

    @property
    def admission_uri(self) -> str:
        return self.public_base_url + ADMISSION_PATH

    # dispatch

    def _register_routes(self) -> None:
        everyone = {HUB, ORG_ADMIN, MEMBER}
        add = self.router.add
        add("GET", "/health", everyone, self._health)
        add("POST", "/beta/bind/init", {HUB}, self._bind_init)
        add("GET", "/verify-start", {ORG_ADMIN}, self._verify_start)
        add("GET", "/session/claim", {HUB}, self._session_claim)
        add("POST", "/beta/bind/approve", {HUB}, self._bind_approve)
        add("GET", "/beta/envelope/status", {HUB, ORG_ADMIN}, self._envelope_status)
        add("POST", "/mint_ect", {ORG_ADMIN}, self._mint)
        add("POST", ADMISSION_PATH, everyone, self._admission)
        add("POST", "/predict_image", {INTERNAL}, self._predict_image)
        add("POST", "/execute", {INTERNAL}, self._execute)

    def handle(
        self,
        method: str,
        target: str,
        headers: Mapping[str, str],
        body: bytes,
        identity: EdgeIdentity | None,
    ) -> tuple[int, dict[str, Any]]:
        path, _, query = target.partition("?")
        route = self.router.match(method.upper(), path)
        if route is False:
            return 404, {"error": "not_found"}
        if route is True:
            return 405, {"error": "method_not_allowed"}
        if identity is None:
            return 401, {"error": "unauthenticated"}
        if identity.role not in route.roles:
            return 403, {"error": _guard_error(route)}
        params = parse_qs(query, keep_blank_values=True)
        lowered = {k.lower(): v for k, v in headers.items()}
        if len(body) > MAX_BODY:
            return 413, {"error": "body_too_large"}
        try:
            payload = loads_strict(body) if body else {}
        except (ValueError, UnicodeDecodeError):
            payload = None
        try:
            return route.handler(identity, lowered, params, payload)
        except EnvelopeError as exc:
            status = 403 if exc.code.startswith("identity_") else 404 if exc.code == "unknown_envelope" else 422
            return status, {"error": exc.code, "detail": exc.detail}
        except FcacError as exc:
            return 422, {"error": exc.code, "detail": exc.detail}

    def _dispatch_internal(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        route = self.router.match("POST", path)
        assert isinstance(route, Route) and INTERNAL in route.roles
        _, body = route.handler(self._internal, {}, {}, payload)
        return body

    # handlers

    def _health(self, identity, headers, params, payload):
        anchors = self.anchors.current()
        return 200, {
            "status": "ok",
            "audience": self.verifier.audience,
            "policy_id": self.policy.meta.policy_id,
            "policy_digest": self.policy.digest,
            "anchor_set_version": anchors.version,
            "identity": {"role": identity.role, "org_id": identity.org_id},
        }

    def _bind_init(self, identity, headers, params, payload):
        if not isinstance(payload, dict):
            return 400, {"error": "bad_request"}
        now = self.clock()
        validity = None
        if "exp" in payload or "nbf" in payload:
            validity = (payload.get("nbf", now), payload.get("exp"))
        elif "validity_seconds" in payload:
            validity = (now, now + payload["validity_seconds"])
        participants = payload.get("participants", [])
        if not isinstance(participants, list):
            return 422, {"error": "bad_quorum", "detail": "participants must be a list"}
        env = self.envelopes.bind_init(
            identity, participants, payload.get("k"), payload.get("n"), now, validity=validity
        )
        return 200, {
            "envelope_id": env.envelope_id,
            "state": env.state,
            "quorum": {"k": env.quorum_k, "n": env.quorum_n},
            "participants": list(env.participants),
            "nbf": env.nbf,
            "exp": env.exp,
        }

    def _verify_start(self, identity, headers, params, payload):
        sess = self.envelopes.verify_start(identity, self.clock(), params.get("envelope_id", [None])[0])
        return 200, {
            "code": sess.code,
            "participant": sess.participant,
            "envelope_id": sess.envelope_id,
            "expires_at": sess.issued_at + sess.ttl,
        }

    def _session_claim(self, identity, headers, params, payload):
        code = params.get("code", [""])[0]
        sess = self.envelopes.session_claim(identity, code, self.clock())
        return 200, {"session_id": sess.session_id, "participant": sess.participant, "envelope_id": sess.envelope_id}

    def _bind_approve(self, identity, headers, params, payload):
        if not isinstance(payload, dict) or not isinstance(payload.get("session_id"), str):
            return 422, {"error": "session_not_claimed", "detail": "session_id required"}
        env = self.envelopes.bind_approve(identity, payload["session_id"], self.clock())
        out = {
            "envelope_id": env.envelope_id,
            "state": env.state,
            "approvals": sorted(env.approvals),
            "quorum": {"k": env.quorum_k, "n": env.quorum_n},
        }
        if env.state == ACTIVE:
            out["message"] = f"Envelope created: {env.envelope_id}"
        return 200, out

    def _envelope_status(self, identity, headers, params, payload):
        eid = params.get("envelope_id", [""])[0]
        status = self.envelopes.envelope_status(eid, self.clock())
        return 200, {
            "envelope_id": status.envelope_id,
            "state": status.state,
            "nbf": status.nbf,
            "exp": status.exp,
            "model_ready": self.backend.is_ready(eid),
        }

    def _mint(self, identity, headers, params, payload):
        if not isinstance(payload, dict):
            return 400, {"error": "bad_request"}
        if payload.get("issuer_org", identity.org_id) != identity.org_id:
            return 403, {"error": "identity_mismatch", "detail": "admins mint only for their own org"}
        profiles = payload.get("profiles")
        if profiles is None and "role" in payload:
            profiles = list(self.policy.cap_profiles_default.get(payload["role"], []))
            if not profiles:
                return 422, {"error": "unknown_profile", "detail": f"no default profiles for {payload['role']!r}"}
        if not isinstance(profiles, list) or not all(isinstance(p, str) for p in profiles):
            return 422, {"error": "unknown_profile", "detail": "profiles must be a list of names"}
        if not isinstance(payload.get("subject"), str) or not payload["subject"]:
            return 422, {"error": "bad_request", "detail": "subject required"}
        now = self.clock()
        nbf = payload.get("nbf", now)
        exp = payload.get("exp", nbf + payload.get("ttl", 3600))
        handle = f"issuer-{identity.org_id}"
        if not self.keystore.paths(handle)[0].exists():
            return 422, {"error": "issuer_key_inactive", "detail": f"no issuer key for {identity.org_id!r}"}
        req = MintRequest(
            issuer_key_handle=handle,
            holder_jwk=payload.get("holder_jwk") or {},
            profiles=profiles,
            validity=(nbf, exp),
            subject=payload["subject"],
            audience=payload.get("audience"),
            envelope_scope=payload.get("envelope_scope"),
        )
        token = mint_ect(self.policy, req, keystore=self.keystore, anchors=self.anchors.current(), now=now, rng=self.rng)
        return 200, {
            "ect": token.compact,
            "jti": token.jti,
            "iss": token.iss,
            "exp": token.exp,
            "tuples": [t.to_dict() for t in token.tuples],
            "tuples_digest": tuples_digest(token.tuples),
        }

    def _admission(self, identity, headers, params, payload):
        auth = headers.get("authorization", "")
        ect = auth[len("DPoP ") :].strip() if auth.startswith("DPoP ") else None
        proof = headers.get("dpop")
        now = self.clock()
        execution = None
        if isinstance(payload, dict):
            try:
                execution = ExecutionTuple.from_dict(payload.get("execution"), default_audience=self.verifier.audience)
            except PolicyError:
                execution = None
        req = AdmissionRequest(ect, proof, execution, "POST", self.admission_uri, now)
        decision = self.verifier.decide(
            req, self.anchors.current(), self.envelopes.status_view(now), self.replay_cache, now
        )
        seq = self.decision_log.append(decision)
        out: dict[str, Any] = {
            "outcome": decision.outcome,
            "reason": decision.reason,
            "decision_digest": decision.decision_digest,
            "seq": seq,
            "decision": decision.to_dict(),
        }
        if decision.allowed:
            with self._count_lock:
                self.allow_count += 1
            job = {"execution": execution.to_dict(), "payload": payload.get("payload", {})}
            path = "/predict_image" if execution.action == "predict" else "/execute"
            out["result"] = self._dispatch_internal(path, job)
        return 200, out

    def _predict_image(self, identity, headers, params, payload):
        execution = ExecutionTuple.from_dict(payload["execution"])
        digit = (payload.get("payload") or {}).get("digit")
        if isinstance(digit, bool) or not isinstance(digit, int) or not 0 <= digit <= 9:
            self.backend._count()
            return 422, {"status": "bad_input", "detail": "digit must be an integer 0-9"}
        return 200, self.backend.predict(execution, digit)

    def _execute(self, identity, headers, params, payload):
        return 200, self.backend.execute(ExecutionTuple.from_dict(payload["execution"]))
