from __future__ import annotations

import json
import ssl
import time

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from fcac.errors import ConfigError
from fcac.gateway.client import GatewayClient
from fcac.gateway.config import GatewayConfig, load_config
from fcac.gateway.pki import issue_dev_pki
from fcac.gateway.server import GatewayServer
from fcac.identity import INTERNAL
from fcac.proofs import build_proof
from fcac.registry import public_jwk

from . import deploy

ROUTES = {
    ("POST", "/beta/bind/init"), ("GET", "/verify-start"), ("GET", "/session/claim"),
    ("POST", "/beta/bind/approve"), ("POST", "/mint_ect"), ("POST", "/admission/check"),
    ("POST", "/predict_image"),
}


@pytest.fixture(scope="module")
def dep(tmp_path_factory):
    d = deploy.build(tmp_path_factory.mktemp("gw"))
    yield d
    d.close()


def test_routes_present_and_guarded(dep):
    table = {(r.method, r.path): r for r in dep.gateway.router}
    assert ROUTES <= set(table)
    assert all(r.roles for r in table.values())
    assert table[("POST", "/predict_image")].roles == {INTERNAL}


def test_unguarded_route_refused(dep):
    with pytest.raises(ValueError):
        dep.gateway.router.add("GET", "/open", set(), lambda *a: (200, {}))


def test_health_reports_identity(dep):
    status, body = dep.client("hub").get("/health")
    assert status == 200
    assert body["identity"]["role"] == "hub"
    assert body["policy_id"] == "fcac-mnist-poc"


def test_no_client_certificate_is_rejected(dep):
    with pytest.raises((ssl.SSLError, ConnectionError, OSError)):
        dep.client(None).get("/health")


def test_foreign_ca_client_rejected(dep, tmp_path):
    other = issue_dev_pki(tmp_path, "verifier.local", {"evil": ("hub", "federation")})
    client = GatewayClient(dep.server.url, cert=str(other["evil"]["cert"]), key=str(other["evil"]["key"]),
                           ca=str(dep.pki["ca"]["cert"]), server_name="verifier.local")
    with pytest.raises((ssl.SSLError, ConnectionError, OSError)):
        client.get("/health")


@pytest.mark.parametrize(
    "who,method,path,error",
    [
        ("alice", "POST", "/beta/bind/init", "identity_not_hub"),
        ("admin-a", "POST", "/beta/bind/init", "identity_not_hub"),
        ("hub", "GET", "/verify-start", "identity_not_admin"),
        ("hub", "POST", "/mint_ect", "identity_not_admin"),
        ("alice", "GET", "/session/claim", "identity_not_hub"),
        ("hub", "POST", "/predict_image", "internal_route_violation"),
        ("admin-a", "POST", "/execute", "internal_route_violation"),
    ],
)
def test_route_guards(dep, who, method, path, error):
    status, body = dep.client(who).request(method, path, body={} if method == "POST" else None)
    assert (status, body["error"]) == (403, error)


def test_not_found_and_method(dep):
    assert dep.client("hub").get("/nope")[0] == 404
    assert dep.client("hub").get("/mint_ect")[0] == 405


def _admit(dep, ect, key, execution, payload=None):
    proof = build_proof(key, "POST", dep.gateway.admission_uri, ect, int(time.time())).compact
    return dep.client("alice").post(
        "/admission/check", {"execution": execution, "payload": payload or {}},
        headers={"Authorization": f"DPoP {ect}", "DPoP": proof},
    )


def test_full_flow_and_backend_accounting(dep):
    eid = deploy.ceremony(dep)
    holder = Ed25519PrivateKey.generate()
    admin = dep.client("admin-a")
    status, minted = admin.post("/mint_ect", {"profiles": ["capset:predictor_even", "capset:egress_safe"],
                                               "holder_jwk": public_jwk(holder), "subject": "dr-who"})
    assert status == 200, minted
    ect = minted["ect"]
    predict = {"resource": "PET-CT", "action": "predict", "envelope_id": eid,
               "qualifiers": {"cohort": "EVEN_ONLY", "purpose": "model_prediction"}}
    calls0, allows0 = dep.gateway.backend.calls, dep.gateway.allow_count
    status, out = _admit(dep, ect, holder, predict, {"digit": 4})
    assert status == 200 and out["outcome"] == "ALLOW"
    assert out["result"]["status"] == "model_not_ready"
    dep.gateway.backend.publish_model(eid)
    assert _admit(dep, ect, holder, predict, {"digit": 4})[1]["result"]["label"] == 4
    assert _admit(dep, ect, holder, predict, {"digit": 3})[1]["result"]["label"] == "masked"
    export = {"resource": "MODEL_PARAMS", "action": "export", "envelope_id": eid,
              "qualifiers": {"agg": "aggregated", "pii": False}}
    assert _admit(dep, ect, holder, export)[1]["result"]["status"] == "accepted"
    denied = _admit(dep, ect, Ed25519PrivateKey.generate(), predict, {"digit": 4})[1]
    assert denied["reason"] == "holder_binding_mismatch" and "result" not in denied
    prohibited = {**export, "resource": "PET-CT"}
    assert _admit(dep, ect, holder, prohibited)[1]["reason"] == "prohibited"
    assert dep.gateway.backend.calls - calls0 == dep.gateway.allow_count - allows0 == 4


def test_admission_without_headers_is_deny_200(dep):
    status, body = dep.client("alice").post("/admission/check", {"execution": {}})
    assert status == 200
    assert (body["outcome"], body["reason"]) == ("DENY", "malformed_artifact")


def test_mint_rules(dep):
    holder = public_jwk(Ed25519PrivateKey.generate())
    a, b = dep.client("admin-a"), dep.client("admin-b")
    status, body = a.post("/mint_ect", {"profiles": ["capset:trainer_A"], "holder_jwk": holder,
                                        "subject": "x", "issuer_org": "hospital-b"})
    assert (status, body["error"]) == (403, "identity_mismatch")
    status, body = b.post("/mint_ect", {"profiles": ["capset:trainer_A"], "holder_jwk": holder, "subject": "x"})
    assert body["error"] == "issuer_key_inactive"
    status, body = a.post("/mint_ect", {"profiles": ["capset:ghost"], "holder_jwk": holder, "subject": "x"})
    assert (status, body["error"]) == (422, "unknown_profile")
    status, body = a.post("/mint_ect", {"role": "trainer", "holder_jwk": holder, "subject": "x"})
    assert status == 200 and [t["resource"] for t in body["tuples"]] == ["PET-CT"]


def test_envelope_errors_over_http(dep):
    hub = dep.client("hub")
    status, body = hub.post("/beta/bind/init", {"participants": ["hospital-a"], "k": 2, "n": 1})
    assert (status, body["error"]) == (422, "bad_quorum")
    status, body = hub.get("/session/claim", params={"code": "000000x"})
    assert body["error"] == "invalid_code"
    status, body = hub.get("/beta/envelope/status", params={"envelope_id": "missing"})
    assert status == 404


def test_anchor_file_reloaded(dep):
    from fcac.registry import TrustRegistry

    reg = TrustRegistry(dep.root / "registry.jsonl")
    reg.register_org("hospital-b", public_jwk(Ed25519PrivateKey.generate()), (0, 2**40))
    (dep.root / "anchors.json").write_bytes(reg.snapshot_anchors().to_bytes())
    assert dep.client("hub").get("/health")[1]["anchor_set_version"] == 2


# configuration

def test_config_audience_mismatch(tmp_path):
    root = tmp_path
    d = deploy.build(root / "a")
    d.close()
    raw = json.loads((root / "a" / "gateway.json").read_text())
    raw["service_audience"] = "svc:elsewhere"
    (root / "a" / "gateway.json").write_text(json.dumps(raw))
    with pytest.raises(ConfigError):
        GatewayServer(load_config(root / "a" / "gateway.json"))


def test_config_san_mismatch(tmp_path):
    d = deploy.build(tmp_path / "b")
    d.close()
    raw = json.loads((tmp_path / "b" / "gateway.json").read_text())
    raw["server_name"] = "other.local"
    (tmp_path / "b" / "gateway.json").write_text(json.dumps(raw))
    with pytest.raises(ConfigError) as exc:
        GatewayServer(load_config(tmp_path / "b" / "gateway.json"))
    assert "SAN" in exc.value.detail


def test_config_env_override(tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"service_audience": "a", "policy_path": "p", "anchors_path": "x",
                                                  "keystore": "k", "vault_root": "v", "decision_log": "d"}))
    monkeypatch.setenv("FCAC_CONFIG", str(tmp_path / "c.json"))
    cfg = load_config("/does/not/exist.json")
    assert cfg.keystore == tmp_path / "k"


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"mode": "carrier-pigeon"},
                                 {"identities": {"CN=x": {"role": "root"}}}])
def test_config_rejects(raw):
    base = {"service_audience": "a", "policy_path": "p", "anchors_path": "x", "keystore": "k",
            "vault_root": "v", "decision_log": "d"}
    with pytest.raises(ConfigError):
        GatewayConfig.from_dict({**base, **raw})


# forwarded identity mode

def test_forwarded_mode(tmp_path):
    d = deploy.build(tmp_path / "fwd", mode="forwarded")
    try:
        url = d.server.url
        assert url.startswith("http://")
        hub_dn = {"X-SSL-Client-S-DN": "CN=hub,O=federation"}
        status, body = GatewayClient(url, headers=hub_dn).get("/health")
        assert status == 200 and body["identity"]["role"] == "hub"
        assert GatewayClient(url).get("/health")[0] == 401
    finally:
        d.close()
    d = deploy.build(tmp_path / "fwd2", mode="forwarded", trusted_edges=["10.0.0.0/8"])
    try:
        status, body = GatewayClient(d.server.url, headers={"X-SSL-Client-S-DN": "CN=hub,O=federation"}).get("/health")
        assert (status, body["error"]) == (403, "untrusted_forwarder")
    finally:
        d.close()
