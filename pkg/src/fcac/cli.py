"""``fcac`` operator command line.

Every command prints exactly one JSON object on stdout. Exit status is 0 on
success and 1 on any failure or expectation mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .admission import REASON_CODES, audit_replay
from .errors import FcacError
from .proofs import build_proof
from .registry import (
    Keystore,
    TrustRegistry,
    load_anchor_file,
    load_private_key,
    sign_anchor_file,
)
from .tokens import parse_ect

ADMISSION_PATH = "/admission/check"


class CommandError(Exception):
    def __init__(self, code: str, detail: str = "", **extra: Any) -> None:
        super().__init__(code)
        self.code, self.detail, self.extra = code, detail, extra


def _emit(obj: dict[str, Any]) -> None:
    print(json.dumps(obj, sort_keys=True))


def _now() -> int:
    return int(time.time())


def default_probe_file() -> Path:
    return Path(str(resources.files("fcac").joinpath("data/probes.json")))


def default_policy_file() -> Path:
    return Path(str(resources.files("fcac").joinpath("data/policy.json")))


# connection helpers


def _client(args: argparse.Namespace):
    from .gateway.client import GatewayClient

    url = args.gateway or os.environ.get("FCAC_GATEWAY")
    if not url:
        raise CommandError("usage", "--gateway or FCAC_GATEWAY is required")
    return GatewayClient(url, cert=args.cert, key=args.key, ca=args.ca, server_name=args.server_name)


def _add_conn(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gateway", help="gateway address, e.g. https://127.0.0.1:8443")
    p.add_argument("--server-name", default="verifier.local", help="expected dNSName of the gateway certificate")
    p.add_argument("--cert", help="client certificate (PEM)")
    p.add_argument("--key", help="client certificate key (PEM)")
    p.add_argument("--ca", help="CA bundle used to verify the gateway")


def _check(status: int, body: dict[str, Any], step: str) -> dict[str, Any]:
    if status != 200:
        raise CommandError(body.get("error", f"http_{status}"), body.get("detail", ""), step=step, status=status)
    return body


# keygen


def cmd_keygen(args: argparse.Namespace) -> int:
    name = args.name or f"{args.role}-{args.org}"
    store = Keystore(args.out)
    try:
        _, jwk, thumb = store.generate(name, force=args.force)
    except FileExistsError as exc:
        raise CommandError("exists", str(exc)) from exc
    key_path, jwk_path, jkt_path = store.paths(name)
    _emit({"name": name, "private_key": str(key_path), "jwk": str(jwk_path), "thumbprint_file": str(jkt_path), "thumbprint": thumb})
    return 0


# anchors


def _validity(args: argparse.Namespace) -> tuple[int, int]:
    nbf = args.nbf if args.nbf is not None else _now()
    return nbf, args.not_after if args.not_after is not None else nbf + args.days * 86400


def cmd_anchors(args: argparse.Namespace) -> int:
    if args.anchors_cmd == "import":
        signer = json.loads(Path(args.signer_jwk).read_text()) if args.signer_jwk else None
        snap = load_anchor_file(args.file, args.signature, signer)
        if args.out:
            Path(args.out).write_bytes(snap.to_bytes())
        _emit({"version": snap.version, "anchors": len(snap.anchors), "snapshot_digest": snap.snapshot_digest})
        return 0
    registry = TrustRegistry(args.registry)
    if args.anchors_cmd == "register":
        jwk = json.loads(Path(args.jwk).read_text())
        rec = registry.register_org(args.org, jwk, _validity(args), role=args.role)
        _emit({"registered": rec.to_dict(), "version": registry.version})
    elif args.anchors_cmd == "rotate":
        jwk = json.loads(Path(args.jwk).read_text())
        snap = registry.rotate_key(args.org, jwk, role=args.role)
        _emit({"version": snap.version, "snapshot_digest": snap.snapshot_digest})
    elif args.anchors_cmd == "revoke":
        snap = registry.revoke_key(args.thumbprint)
        _emit({"version": snap.version, "snapshot_digest": snap.snapshot_digest})
    elif args.anchors_cmd == "export":
        snap = registry.snapshot_anchors()
        data = snap.to_bytes()
        out = Path(args.out)
        tmp = out.with_suffix(out.suffix + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, out)
        result = {"file": str(out), "version": snap.version, "snapshot_digest": snap.snapshot_digest}
        if args.sign_key:
            sig_path = Path(str(out) + ".sig")
            sig_path.write_text(sign_anchor_file(data, load_private_key(args.sign_key)) + "\n")
            result["signature_file"] = str(sig_path)
        _emit(result)
    return 0


# envelope ceremony


def _read_codes(args: argparse.Namespace, expected: int) -> list[str]:
    if args.codes:
        return list(args.codes)
    if args.codes_from_file:
        path = Path(args.codes_from_file)
        deadline = time.monotonic() + args.wait
        while not path.exists():
            if time.monotonic() > deadline:
                raise CommandError("codes_unavailable", f"{path} did not appear within {args.wait}s")
            time.sleep(0.05)
        text = path.read_text()
        try:
            codes = json.loads(text)
        except ValueError:
            codes = text.split()
        return [str(c).strip() for c in codes if str(c).strip()]
    codes = []
    for i in range(expected):
        print(f"Enter 6-digit code #{i + 1}: ", end="", file=sys.stderr, flush=True)
        codes.append(sys.stdin.readline().strip())
    return codes


def _init(client, args) -> dict[str, Any]:
    body: dict[str, Any] = {"participants": args.participants, "k": args.k, "n": args.n or len(args.participants)}
    if args.validity_seconds:
        body["validity_seconds"] = args.validity_seconds
    return _check(*client.post("/beta/bind/init", body), "bind_init")


def _approve_codes(client, codes: Sequence[str]) -> dict[str, Any]:
    last: dict[str, Any] = {}
    for code in codes:
        claim = _check(*client.get("/session/claim", params={"code": code}), "session_claim")
        last = _check(*client.post("/beta/bind/approve", {"session_id": claim["session_id"]}), "bind_approve")
    return last


def cmd_envelope(args: argparse.Namespace) -> int:
    client = _client(args)
    if args.envelope_cmd == "init":
        _emit(_init(client, args))
        return 0
    if args.envelope_cmd == "status":
        _emit(_check(*client.get("/beta/envelope/status", params={"envelope_id": args.envelope_id}), "status"))
        return 0
    if args.envelope_cmd == "approve":
        result = _approve_codes(client, _read_codes(args, 1))
        _emit(result)
        return 0
    init = _init(client, args)
    print(f"Bind initialized: {init['envelope_id']} (k={args.k}, n={init['quorum']['n']})", file=sys.stderr)
    result = _approve_codes(client, _read_codes(args, init["quorum"]["n"]))
    if result.get("state") != "Active":
        _emit({**result, "ok": False})
        return 1
    print(result["message"], file=sys.stderr)
    _emit({**result, "ok": True})
    return 0


# mint / probe / predict


def cmd_mint(args: argparse.Namespace) -> int:
    client = _client(args)
    body: dict[str, Any] = {
        "holder_jwk": json.loads(Path(args.holder_jwk).read_text()),
        "subject": args.subject,
        "ttl": args.ttl,
    }
    if args.profiles:
        body["profiles"] = args.profiles
    if args.role:
        body["role"] = args.role
    if args.envelope_scope:
        body["envelope_scope"] = args.envelope_scope
    minted = _check(*client.post("/mint_ect", body), "mint_ect")
    Path(args.out).write_text(minted["ect"] + "\n")
    _emit({"ect_file": args.out, "jti": minted["jti"], "exp": minted["exp"], "tuples_digest": minted["tuples_digest"]})
    return 0


def _admit(client, args, ect: str, key: Ed25519PrivateKey, execution: dict, payload: dict | None, rng=None):
    uri = (args.public_url or client.public_base_url) + ADMISSION_PATH
    proof = build_proof(key, "POST", uri, ect, _now(), args.nonce, rng=rng)
    body: dict[str, Any] = {"execution": execution}
    if payload is not None:
        body["payload"] = payload
    headers = {"Authorization": f"DPoP {ect}", "DPoP": proof.compact}
    return _check(*client.post(ADMISSION_PATH, body, headers=headers), "admission_check")


def load_probes(path: str | Path) -> list[dict[str, Any]]:
    probes = json.loads(Path(path).read_text())
    if not isinstance(probes, list):
        raise CommandError("bad_probe_file", "probe file must be a JSON list")
    for p in probes:
        for field_name in ("name", "execution", "expected_outcome", "expected_reason"):
            if field_name not in p:
                raise CommandError("bad_probe_file", f"probe missing {field_name!r}")
        if p["expected_reason"] not in REASON_CODES:
            raise CommandError("bad_probe_file", f"unregistered reason {p['expected_reason']!r}")
        if p["expected_outcome"] not in ("ALLOW", "DENY"):
            raise CommandError("bad_probe_file", f"bad outcome {p['expected_outcome']!r}")
    return probes


def cmd_probe(args: argparse.Namespace) -> int:
    client = _client(args)
    ect = Path(args.ect).read_text().strip()
    holder = load_private_key(args.holder_key)
    intruder = load_private_key(args.intruder_key) if args.intruder_key else Ed25519PrivateKey.generate()
    rng = random.Random(args.seed) if args.seed is not None else None
    rows = []
    for probe in load_probes(args.probes):
        execution = {**probe["execution"], "envelope_id": probe["execution"].get("envelope_id", args.envelope_id)}
        key = intruder if probe.get("proof_key") == "intruder" else holder
        got = _admit(client, args, ect, key, execution, probe.get("payload"), rng)
        rows.append(
            {
                "name": probe["name"],
                "expected_outcome": probe["expected_outcome"],
                "expected_reason": probe["expected_reason"],
                "outcome": got["outcome"],
                "reason": got["reason"],
                "pass": (got["outcome"], got["reason"]) == (probe["expected_outcome"], probe["expected_reason"]),
            }
        )
    ok = all(r["pass"] for r in rows)
    _emit({"probes": rows, "passed": sum(r["pass"] for r in rows), "total": len(rows), "ok": ok})
    return 0 if ok else 1


def cmd_predict(args: argparse.Namespace) -> int:
    client = _client(args)
    execution = {
        "resource": args.resource,
        "action": "predict",
        "qualifiers": {"cohort": args.cohort, "purpose": "model_prediction"},
        "envelope_id": args.envelope_id,
    }
    ect = Path(args.ect).read_text().strip()
    got = _admit(client, args, ect, load_private_key(args.holder_key), execution, {"who": args.who, "digit": args.digit})
    out = {"who": args.who, "outcome": got["outcome"], "reason": got["reason"]}
    if "result" in got:
        out["result"] = got["result"]
    _emit(out)
    return 0 if got["outcome"] == "ALLOW" else 1


# audit / serve / pki


def cmd_audit(args: argparse.Namespace) -> int:
    report = audit_replay(args.log)
    _emit(report.to_dict())
    return 0 if report.clean else 1


def cmd_serve(args: argparse.Namespace) -> int:
    from .gateway.config import load_config
    from .gateway.server import GatewayServer

    server = GatewayServer(load_config(args.config))
    print(f"fcac gateway listening on {server.url} (public {server.gateway.public_base_url})", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_pki(args: argparse.Namespace) -> int:
    from .gateway.pki import issue_dev_pki

    clients = {}
    for spec in args.client:
        stem, _, rest = spec.partition("=")
        cn, _, org = rest.partition(",")
        clients[stem] = (cn or stem, org or None)
    paths = issue_dev_pki(args.out, args.server_name, clients)
    _emit({k: {kk: str(vv) for kk, vv in v.items()} for k, v in paths.items()})
    return 0


def cmd_verify_ect(args: argparse.Namespace) -> int:
    from .tokens import verify_ect_signature

    token = parse_ect(Path(args.ect).read_text().strip())
    thumb = verify_ect_signature(token, load_anchor_file(args.anchors))
    _emit({"issuer_thumbprint": thumb, "iss": token.iss, "sub": token.sub, "exp": token.exp, "jkt": token.jkt})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcac", description="Operator tooling for the fcac trust chain and gateway.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate an Ed25519 key pair, JWK and thumbprint")
    p.add_argument("--role", required=True, choices=["org", "issuer", "holder"])
    p.add_argument("--org", required=True)
    p.add_argument("--out", default="keys")
    p.add_argument("--name")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("anchors", help="trust registry and anchor-set files")
    asub = p.add_subparsers(dest="anchors_cmd", required=True)
    for name in ("register", "rotate"):
        ap = asub.add_parser(name)
        ap.add_argument("--registry", required=True)
        ap.add_argument("--org", required=True)
        ap.add_argument("--jwk", required=True)
        ap.add_argument("--role", default="issuer")
        ap.add_argument("--nbf", type=int)
        ap.add_argument("--not-after", type=int)
        ap.add_argument("--days", type=int, default=365)
    ap = asub.add_parser("revoke")
    ap.add_argument("--registry", required=True)
    ap.add_argument("--thumbprint", required=True)
    ap = asub.add_parser("export")
    ap.add_argument("--registry", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--sign-key", help="Ed25519 key for a detached <out>.sig signature")
    ap = asub.add_parser("import")
    ap.add_argument("--file", required=True)
    ap.add_argument("--signature")
    ap.add_argument("--signer-jwk")
    ap.add_argument("--out")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("envelope", help="quorum envelope ceremony")
    esub = p.add_subparsers(dest="envelope_cmd", required=True)
    for name in ("ceremony", "init"):
        ep = esub.add_parser(name)
        _add_conn(ep)
        ep.add_argument("--participants", nargs="+", required=True)
        ep.add_argument("--k", type=int, required=True)
        ep.add_argument("--n", type=int)
        ep.add_argument("--validity-seconds", type=int)
        if name == "ceremony":
            ep.add_argument("--codes", nargs="+")
            ep.add_argument("--codes-from-file")
            ep.add_argument("--wait", type=float, default=60.0)
    ep = esub.add_parser("approve")
    _add_conn(ep)
    ep.add_argument("--codes", nargs="+")
    ep.add_argument("--codes-from-file")
    ep.add_argument("--wait", type=float, default=0.0)
    ep = esub.add_parser("status")
    _add_conn(ep)
    ep.add_argument("--envelope-id", required=True)
    p.set_defaults(func=cmd_envelope)

    p = sub.add_parser("mint", help="mint an ECT through /mint_ect")
    _add_conn(p)
    p.add_argument("--profiles", nargs="+")
    p.add_argument("--role", help="use the policy's default profiles for this role")
    p.add_argument("--holder-jwk", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--ttl", type=int, default=3600)
    p.add_argument("--envelope-scope")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mint)

    for name, func in (("probe", cmd_probe), ("predict", cmd_predict)):
        p = sub.add_parser(name)
        _add_conn(p)
        p.add_argument("--ect", required=True)
        p.add_argument("--holder-key", required=True)
        p.add_argument("--envelope-id", required=True)
        p.add_argument("--public-url", help="gateway URL as signed into the proof htu")
        p.add_argument("--nonce")
        p.set_defaults(func=func)
        if name == "probe":
            p.add_argument("--probes", default=str(default_probe_file()))
            p.add_argument("--intruder-key")
            p.add_argument("--seed", type=int)
        else:
            p.add_argument("--who", required=True)
            p.add_argument("--cohort", required=True)
            p.add_argument("--digit", type=int, required=True)
            p.add_argument("--resource", default="PET-CT")

    p = sub.add_parser("audit", help="replay and verify a decision log")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify-ect", help="check an ECT signature against an anchor file")
    p.add_argument("--ect", required=True)
    p.add_argument("--anchors", required=True)
    p.set_defaults(func=cmd_verify_ect)

    p = sub.add_parser("serve", help="run the gateway")
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("pki", help="write a throwaway development PKI")
    p.add_argument("--out", required=True)
    p.add_argument("--server-name", default="verifier.local")
    p.add_argument("--client", action="append", default=[], help="stem=CN[,O]")
    p.set_defaults(func=cmd_pki)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        _emit({"ok": False, "error": exc.code, "detail": exc.detail, **exc.extra})
    except FcacError as exc:
        _emit({"ok": False, "error": exc.code, "detail": exc.detail})
    except (OSError, ValueError) as exc:
        _emit({"ok": False, "error": type(exc).__name__, "detail": str(exc)})
    return 1


if __name__ == "__main__":
    sys.exit(main())
