from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from fcac.admission import AdmissionRequest, AdmissionVerifier
from fcac.cli import default_policy_file
from fcac.envelopes import EnvelopeBook
from fcac.identity import HUB, ORG_ADMIN, EdgeIdentity
from fcac.policy import ExecutionTuple, PolicyArtifact, load_policy
from fcac.proofs import ReplayCache, build_proof
from fcac.registry import Keystore, TrustAnchorSet, TrustRegistry, public_jwk
from fcac.tokens import EnvelopeCapabilityToken, MintRequest, mint_ect

NOW = 1_760_000_000
URI = "https://verifier.local:8443/admission/check"
AUD = "svc:fl-gateway:eu"
HUB_ID = EdgeIdentity("CN=hub,O=federation", HUB)


def admin(org: str) -> EdgeIdentity:
    return EdgeIdentity(f"CN=admin,O={org}", ORG_ADMIN, org)


ALLOW_EXEC = {
    "resource": "TUMOR_MEASUREMENTS",
    "action": "read",
    "qualifiers": {"agg": "aggregated", "pii": False, "contact": False},
}


@pytest.fixture(scope="session")
def policy() -> PolicyArtifact:
    return load_policy(default_policy_file().read_bytes())


@dataclass
class World:
    """An in-process federation: one issuer org, one holder, one Active envelope."""

    policy: PolicyArtifact
    keystore: Keystore
    registry: TrustRegistry
    anchors: TrustAnchorSet
    book: EnvelopeBook
    envelope_id: str
    holder: Ed25519PrivateKey
    verifier: AdmissionVerifier
    rng: random.Random = field(default_factory=lambda: random.Random(7))

    def mint(self, profiles=("capset:trainer_A", "capset:data_scientist"), *, holder=None, validity=None,
             handle="issuer-hospital-a", now=NOW, jti=None, **kw) -> EnvelopeCapabilityToken:
        holder = holder or self.holder
        req = MintRequest(
            issuer_key_handle=handle,
            holder_jwk=public_jwk(holder),
            profiles=list(profiles),
            validity=validity or (now, now + 3600),
            subject="alice@hospital-a",
            **kw,
        )
        return mint_ect(self.policy, req, keystore=self.keystore, anchors=self.anchors, now=now,
                        jti=jti, rng=self.rng)

    def execution(self, raw: dict[str, Any] | None = None, envelope_id: str | None = None) -> ExecutionTuple:
        raw = dict(raw or ALLOW_EXEC)
        raw.setdefault("envelope_id", envelope_id or self.envelope_id)
        return ExecutionTuple.from_dict(raw, default_audience=AUD)

    def request(self, ect: str | None, *, key=None, method="POST", uri=URI, now=NOW, execution=None,
                proof: str | None = "auto", proof_ect: str | None = None, jti=None) -> AdmissionRequest:
        if proof == "auto":
            proof = build_proof(key or self.holder, method, uri, proof_ect or ect, now, jti=jti, rng=self.rng).compact
        return AdmissionRequest(ect, proof, execution or self.execution(), "POST", URI, now)

    def decide(self, req: AdmissionRequest, cache: ReplayCache | None = None, now: int = NOW):
        return self.verifier.decide(req, self.anchors, self.book.status_view(now), cache if cache is not None else ReplayCache(300), now)


def activate(book: EnvelopeBook, participants=("hospital-a", "hospital-b"), k=2, now=NOW, **kw) -> str:
    env = book.bind_init(HUB_ID, list(participants), k, len(participants), now, **kw)
    for org in participants[:k]:
        code = book.verify_start(admin(org), now).code
        sess = book.session_claim(HUB_ID, code, now)
        book.bind_approve(HUB_ID, sess.session_id, now)
    return env.envelope_id


@pytest.fixture
def world(tmp_path: Path, policy: PolicyArtifact) -> World:
    ks = Keystore(tmp_path / "keys")
    _, issuer_jwk, _ = ks.generate("issuer-hospital-a")
    registry = TrustRegistry(tmp_path / "registry.jsonl")
    registry.register_org("hospital-a", issuer_jwk, (NOW - 86400, NOW + 365 * 86400))
    book = EnvelopeBook(tmp_path / "envelopes.jsonl", rng=random.Random(1))
    eid = activate(book)
    return World(
        policy=policy,
        keystore=ks,
        registry=registry,
        anchors=registry.snapshot_anchors(),
        book=book,
        envelope_id=eid,
        holder=Ed25519PrivateKey.generate(),
        verifier=AdmissionVerifier(policy, AUD),
    )


def write_json(path: Path, obj: Any) -> Path:
    path.write_text(json.dumps(obj))
    return path


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_ACCEPTANCE: dict[int, dict[str, Any]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    n, title = marker.args
    entry = _ACCEPTANCE.setdefault(n, {"title": title, "ok": True})
    entry["ok"] = entry["ok"] and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}")
