"""Throwaway development PKI: one CA, a server cert and client certs."""

from __future__ import annotations

import datetime as dt
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID


def _name(cn: str, org: str | None = None) -> x509.Name:
    attrs = [x509.NameAttribute(NameOID.COMMON_NAME, cn)]
    if org:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATION_NAME, org))
    return x509.Name(attrs)


def _write_key(key, path: Path) -> None:
    path.write_bytes(
        key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
    )
    path.chmod(0o600)


def _issue(ca_key, ca_name, subject, *, server_name=None, days=30, is_ca=False):
    key = ec.generate_private_key(ec.SECP256R1())
    now = dt.datetime.now(dt.timezone.utc)
    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(ca_name or subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=is_ca, path_length=None), critical=True)
    )
    if server_name:
        builder = builder.add_extension(
            x509.SubjectAlternativeName([x509.DNSName(server_name)]), critical=False
        ).add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
    elif not is_ca:
        builder = builder.add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.CLIENT_AUTH]), critical=False)
    if is_ca:
        builder = builder.add_extension(
            x509.KeyUsage(False, False, False, False, False, True, True, False, False), critical=True
        )
    cert = builder.sign(ca_key or key, hashes.SHA256())
    return key, cert


def issue_dev_pki(
    out_dir: str | Path, server_name: str = "verifier.local", clients: dict[str, tuple[str, str | None]] | None = None
) -> dict[str, dict[str, Path]]:
    """Write ``ca.pem``, ``server.{pem,key}`` and ``<name>.{pem,key}`` per client.

    ``clients`` maps a file stem to ``(common_name, organization)``.
    Returns the written paths by stem.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ca_name = _name("fcac-dev-ca", "fcac")
    ca_key, ca_cert = _issue(None, None, ca_name, is_ca=True, days=365)
    (out / "ca.pem").write_bytes(ca_cert.public_bytes(serialization.Encoding.PEM))
    _write_key(ca_key, out / "ca.key")
    paths: dict[str, dict[str, Path]] = {"ca": {"cert": out / "ca.pem", "key": out / "ca.key"}}
    key, cert = _issue(ca_key, ca_name, _name(server_name, "fcac"), server_name=server_name)
    (out / "server.pem").write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    _write_key(key, out / "server.key")
    paths["server"] = {"cert": out / "server.pem", "key": out / "server.key"}
    for stem, (cn, org) in (clients or {}).items():
        key, cert = _issue(ca_key, ca_name, _name(cn, org))
        (out / f"{stem}.pem").write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        _write_key(key, out / f"{stem}.key")
        paths[stem] = {"cert": out / f"{stem}.pem", "key": out / f"{stem}.key"}
    return paths


def subject_dn(cn: str, org: str | None = None) -> str:
    """The DN string the gateway derives for a client cert issued above."""
    return f"CN={cn}" + (f",O={org}" if org else "")
