"""Minimal HTTPS client that presents a client certificate to the gateway."""

from __future__ import annotations

import http.client
import json
import socket
import ssl
from typing import Any
from urllib.parse import urlencode, urlsplit


class _NamedHTTPSConnection(http.client.HTTPSConnection):
    # connect to an address but verify the certificate for a service name
    def __init__(self, host, port, *, context, server_hostname, timeout):
        super().__init__(host, port, context=context, timeout=timeout)
        self._server_hostname = server_hostname

    def connect(self) -> None:
        sock = socket.create_connection((self.host, self.port), self.timeout)
        self.sock = self._context.wrap_socket(sock, server_hostname=self._server_hostname)


class GatewayClient:
    def __init__(
        self,
        base_url: str,
        *,
        cert: str | None = None,
        key: str | None = None,
        ca: str | None = None,
        server_name: str | None = None,
        headers: dict[str, str] | None = None,
        timeout: float = 10.0,
    ) -> None:
        parts = urlsplit(base_url)
        self.scheme = parts.scheme
        self.host = parts.hostname
        self.port = parts.port or (443 if parts.scheme == "https" else 80)
        self.server_name = server_name or self.host
        self.extra_headers = dict(headers or {})
        self.timeout = timeout
        self._context = None
        if self.scheme == "https":
            ctx = ssl.create_default_context(cafile=ca)
            if cert:
                ctx.load_cert_chain(cert, key)
            self._context = ctx

    @property
    def public_base_url(self) -> str:
        default = 443 if self.scheme == "https" else 80
        port = "" if self.port == default else f":{self.port}"
        return f"{self.scheme}://{self.server_name}{port}"

    def _conn(self):
        if self.scheme == "https":
            return _NamedHTTPSConnection(
                self.host, self.port, context=self._context, server_hostname=self.server_name, timeout=self.timeout
            )
        return http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)

    def request(
        self, method: str, path: str, body: Any = None, headers: dict[str, str] | None = None, params=None
    ) -> tuple[int, dict[str, Any]]:
        if params:
            path = f"{path}?{urlencode(params)}"
        data = json.dumps(body).encode("utf-8") if body is not None else None
        hdrs = {**self.extra_headers, **(headers or {})}
        if data is not None:
            hdrs["Content-Type"] = "application/json"
        conn = self._conn()
        try:
            conn.request(method, path, body=data, headers=hdrs)
            resp = conn.getresponse()
            raw = resp.read()
        finally:
            conn.close()
        return resp.status, (json.loads(raw) if raw else {})

    def get(self, path: str, params=None, headers=None):
        return self.request("GET", path, headers=headers, params=params)

    def post(self, path: str, body: Any = None, headers=None):
        return self.request("POST", path, body=body if body is not None else {}, headers=headers)
