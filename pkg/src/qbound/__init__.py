"""Holevo and quantum Cramer-Rao bounds for mixed-state families, their single-copy
attainability through purification, and a Monte Carlo harness for the two-stage
adaptive protocol."""

from .bounds import BoundResult, hcrb_mixed, hcrb_pure, hcrb_pure_state, qcrb, verify_theorem1
from .measures import POVM, canonical_estimator, fisher_symmetric_povm, matsumoto_povm, shadow_mean
from .protosim import ProtocolConfig, run_trial, simulate
from .sdpcore import SDPProblem, solve_sdp
from .statemodel import StateFamily, builtin_family, purified_state, purify

__version__ = "0.1.0"

__all__ = [
    "BoundResult",
    "POVM",
    "ProtocolConfig",
    "SDPProblem",
    "StateFamily",
    "builtin_family",
    "canonical_estimator",
    "fisher_symmetric_povm",
    "hcrb_mixed",
    "hcrb_pure",
    "hcrb_pure_state",
    "matsumoto_povm",
    "purified_state",
    "purify",
    "qcrb",
    "run_trial",
    "shadow_mean",
    "simulate",
    "solve_sdp",
    "verify_theorem1",
]
