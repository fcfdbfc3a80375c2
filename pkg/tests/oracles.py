"""Independent reference implementations used only by the tests.

None of these import from ``fcac``; they are written from the standards
text, not from the package code.
"""

from __future__ import annotations

import base64
import hashlib
from itertools import product
from typing import Any, Iterable

# RFC 7517 A.1 / RFC 8037 A.3 public keys
RFC7638_RSA = {
    "kty": "RSA",
    "n": "0vx7agoebGcQSuuPiLJXZptN9nndrQmbXEps2aiAFbWhM78LhWx4cbbf"
    "AAtVT86zwu1RK7aPFFxuhDR1L6tSoc_BJECPebWKRXjBZCiFV4n3oknj"
    "hMstn64tZ_2W-5JsGY4Hc5n9yBXArwl93lqt7_RN5w6Cf0h4QyQ5v-65"
    "YGjQR0_FDW2QvzqY368QQMicAtaSqzs8KJZgnYb9c7d0zgdAZHzu6qMQ"
    "vRL5hajrn1n91CbOpbISD08qNLyrdkt-bFTWhAI4vMQFh6WeZu0fM4lF"
    "d2NcRwr3XPksINHaQ-G_xBniIqbw0Ls1jF44-csFCur-kEgU8awapJzK"
    "nqDKgw",
    "e": "AQAB",
    "alg": "RS256",
    "kid": "2011-04-29",
}
EC_P256 = {
    "kty": "EC",
    "crv": "P-256",
    "x": "MKBCTNIcKUSDii11ySs3526iDZ8AiTo7Tu6KPAqv7D4",
    "y": "4Etl6SRW2YiLUrN5vfvVHuhp7x8PxltmWWlbbM4IFyM",
    "use": "enc",
    "kid": "1",
}
OKP_ED25519 = {"kty": "OKP", "crv": "Ed25519", "x": "11qYAYKxCrfVS_7TyWQHOg7hcvPapiMlrwIaaPcHURo"}


def oracle_thumbprint(jwk: dict[str, str]) -> str:
    """Hand-assembled required-member JSON, as in RFC 7638 section 3."""
    if jwk["kty"] == "RSA":
        text = '{"e":"%s","kty":"RSA","n":"%s"}' % (jwk["e"], jwk["n"])
    elif jwk["kty"] == "EC":
        text = '{"crv":"%s","kty":"EC","x":"%s","y":"%s"}' % (jwk["crv"], jwk["x"], jwk["y"])
    elif jwk["kty"] == "OKP":
        text = '{"crv":"%s","kty":"OKP","x":"%s"}' % (jwk["crv"], jwk["x"])
    else:
        raise ValueError(jwk["kty"])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return base64.urlsafe_b64encode(digest).decode("ascii").rstrip("=")


# coverage

MISSING = object()


def oracle_covers(tup: dict[str, Any], req: dict[str, Any]) -> bool:
    """Tuple admits request iff resource and action match and every qualifier
    the tuple names is present in the request with an allowed value."""
    if tup["resource"] != req["resource"] or tup["action"] != req["action"].lower():
        return False
    for name, allowed in tup["scope"].items():
        value = req["qualifiers"].get(name, MISSING)
        if value is MISSING:
            return False
        if not any(type(value) is type(a) and value == a for a in allowed):
            return False
    return True


def enumerate_requests(resources: Iterable[str], actions: Iterable[str], cohorts: Iterable[str]):
    """Every combination; each boolean qualifier is True, False or absent,
    purpose is one of two values or absent."""
    tri = (True, False, MISSING)
    for r, a, c, pii, contact, purpose, agg in product(
        resources, actions, list(cohorts) + [MISSING], tri, tri,
        ("model_training", "model_prediction", MISSING), ("aggregated", MISSING),
    ):
        quals = {
            k: v
            for k, v in (("cohort", c), ("pii", pii), ("contact", contact), ("purpose", purpose), ("agg", agg))
            if v is not MISSING
        }
        yield {"resource": r, "action": a, "qualifiers": quals}


# htu

def oracle_htu(uri: str) -> str:
    scheme, rest = uri.split("://", 1)
    scheme = scheme.lower()
    for sep in "#?":
        rest = rest.split(sep, 1)[0]
    authority, slash, path = rest.partition("/")
    host, _, port = authority.rpartition(":") if ":" in authority else (authority, "", "")
    host = host.lower()
    if port and port != {"http": "80", "https": "443"}[scheme]:
        host = f"{host}:{port}"
    return f"{scheme}://{host}/{path}"
