"""Capability-token trust chain with proof-of-possession boundary admission."""

from .admission import AdmissionDecision, AdmissionRequest, AdmissionVerifier, DecisionLog, audit_replay
from .envelopes import EnvelopeBook
from .policy import (
    CapabilityTuple,
    ExecutionTuple,
    PolicyArtifact,
    check_prohibitions,
    compile_tuples,
    covers,
    load_policy,
)
from .proofs import ReplayCache, build_proof, verify_proof
from .registry import Keystore, TrustAnchorSet, TrustRegistry, jwk_thumbprint
from .tokens import EnvelopeCapabilityToken, MintRequest, mint_ect, parse_ect, verify_ect_signature

__version__ = "0.1.0"

__all__ = [
    "AdmissionDecision",
    "AdmissionRequest",
    "AdmissionVerifier",
    "CapabilityTuple",
    "DecisionLog",
    "EnvelopeBook",
    "EnvelopeCapabilityToken",
    "ExecutionTuple",
    "Keystore",
    "MintRequest",
    "PolicyArtifact",
    "ReplayCache",
    "TrustAnchorSet",
    "TrustRegistry",
    "audit_replay",
    "build_proof",
    "check_prohibitions",
    "compile_tuples",
    "covers",
    "jwk_thumbprint",
    "load_policy",
    "mint_ect",
    "parse_ect",
    "verify_ect_signature",
    "verify_proof",
]
