"""HTTPS front end with native mutual TLS, or trusted forwarded identities."""

from __future__ import annotations

import ipaddress
import json
import logging
import ssl
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable

from cryptography import x509

from ..errors import ConfigError
from ..identity import FORWARDED_HEADER, MEMBER, NATIVE_MTLS, EdgeIdentity
from .app import MAX_BODY, Gateway
from .config import NATIVE, GatewayConfig

log = logging.getLogger(__name__)

FORWARDED_DN_HEADER = "X-SSL-Client-S-DN"
_SHORT_NAMES = {
    "commonName": "CN",
    "organizationName": "O",
    "organizationalUnitName": "OU",
    "countryName": "C",
    "localityName": "L",
    "stateOrProvinceName": "ST",
}


def dn_from_peercert(cert: dict[str, Any]) -> str:
    """Render ``ssl.getpeercert()['subject']`` as ``CN=..,O=..`` in cert order."""
    parts = []
    for rdn in cert.get("subject", ()):
        for name, value in rdn:
            parts.append(f"{_SHORT_NAMES.get(name, name)}={value}")
    return ",".join(parts)


class IdentityResolver:
    def __init__(self, identities: dict[str, dict[str, str]]) -> None:
        self._identities = identities

    def __call__(self, dn: str, source: str) -> EdgeIdentity:
        entry = self._identities.get(dn)
        if entry is None:
            return EdgeIdentity(dn, MEMBER, None, source)
        return EdgeIdentity(dn, entry["role"], entry.get("org_id"), source)


def check_server_certificate(cert_path: Path, server_name: str) -> None:
    try:
        cert = x509.load_pem_x509_certificate(Path(cert_path).read_bytes())
    except (OSError, ValueError) as exc:
        raise ConfigError("config_error", f"cannot load server certificate: {exc}") from exc
    try:
        san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    except x509.ExtensionNotFound as exc:
        raise ConfigError("config_error", "server certificate has no subjectAltName") from exc
    if server_name not in san.get_values_for_type(x509.DNSName):
        raise ConfigError("config_error", f"server certificate SAN lacks dNSName={server_name}")


def _make_handler(gateway: Gateway, resolve: Callable[[str, str], EdgeIdentity], cfg: GatewayConfig):
    trusted = [ipaddress.ip_network(a, strict=False) for a in cfg.trusted_edges]

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "fcac-gateway"

        def setup(self) -> None:
            if isinstance(self.request, ssl.SSLSocket):
                self.request.settimeout(10)
                self.request.do_handshake()
            super().setup()

        def log_message(self, fmt: str, *args: Any) -> None:
            log.debug("%s " + fmt, self.address_string(), *args)

        def _identity(self) -> EdgeIdentity | None | bool:
            if cfg.mode == NATIVE:
                cert = self.connection.getpeercert()
                return resolve(dn_from_peercert(cert), NATIVE_MTLS) if cert else None
            dn = self.headers.get(FORWARDED_DN_HEADER)
            peer = ipaddress.ip_address(self.client_address[0])
            if not any(peer in net for net in trusted):
                return False
            return resolve(dn, FORWARDED_HEADER) if dn else None

        def _send(self, status: int, body: dict[str, Any]) -> None:
            data = json.dumps(body, sort_keys=True).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _dispatch(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self._send(413, {"error": "body_too_large"})
                return
            body = self.rfile.read(length) if length else b""
            identity = self._identity()
            if identity is False:
                self._send(403, {"error": "untrusted_forwarder"})
                return
            status, payload = gateway.handle(self.command, self.path, dict(self.headers.items()), body, identity)
            self._send(status, payload)

        do_GET = do_POST = do_PUT = do_DELETE = _dispatch

    return Handler


class _Server(ThreadingHTTPServer):
    daemon_threads = True

    def handle_error(self, request, client_address) -> None:
        log.info("connection from %s dropped", client_address, exc_info=True)


class GatewayServer:
    def __init__(self, cfg: GatewayConfig, *, gateway: Gateway | None = None, clock=None) -> None:
        if cfg.mode == NATIVE:
            for name in ("tls_cert", "tls_key", "tls_client_ca"):
                if getattr(cfg, name) is None or not Path(getattr(cfg, name)).exists():
                    raise ConfigError("config_error", f"{name} missing")
            check_server_certificate(cfg.tls_cert, cfg.server_name)
        self.cfg = cfg
        self._httpd = _Server((cfg.host, cfg.port), BaseHTTPRequestHandler)
        self.port = self._httpd.server_address[1]
        scheme = "https" if cfg.mode == NATIVE else "http"
        public = cfg.public_base_url or f"{scheme}://{cfg.server_name}:{self.port}"
        kw = {"clock": clock} if clock is not None else {}
        self.gateway = gateway or Gateway.from_config(cfg, public_base_url=public, **kw)
        self._httpd.RequestHandlerClass = _make_handler(self.gateway, IdentityResolver(cfg.identities), cfg)
        if cfg.mode == NATIVE:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.minimum_version = ssl.TLSVersion.TLSv1_2
            ctx.load_cert_chain(cfg.tls_cert, cfg.tls_key)
            ctx.load_verify_locations(cfg.tls_client_ca)
            ctx.verify_mode = ssl.CERT_REQUIRED
            self._httpd.socket = ctx.wrap_socket(
                self._httpd.socket, server_side=True, do_handshake_on_connect=False
            )
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        scheme = "https" if self.cfg.mode == NATIVE else "http"
        return f"{scheme}://{self.cfg.host}:{self.port}"

    def start(self) -> "GatewayServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="fcac-gateway", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve(cfg: GatewayConfig, **kw) -> GatewayServer:
    """Build and start the gateway on a background thread."""
    return GatewayServer(cfg, **kw).start()
