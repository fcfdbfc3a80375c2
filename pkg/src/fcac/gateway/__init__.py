"""Federation gateway: mTLS edge, route guards, admission and guarded backend."""

from .app import AnchorSource, Gateway, GuardedBackend, Router
from .client import GatewayClient
from .config import GatewayConfig, load_config
from .server import GatewayServer, serve

__all__ = [
    "AnchorSource",
    "Gateway",
    "GatewayClient",
    "GatewayConfig",
    "GatewayServer",
    "GuardedBackend",
    "Router",
    "load_config",
    "serve",
]
