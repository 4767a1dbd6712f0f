"""Hypoelliptic diffusion bridges on model spaces and numerical checks of their properties."""

from .bridge import BridgeConfig, girsanov_weight, simulate_bridge
from .ccdist import cc_distance, cc_distance_batch, distance_compare_fit
from .models import MODEL_NAMES, adjoint_system, hormander_level, lie_bracket, make_model
from .sde import PathEnsemble, simulate_diffusion
from .verify import VerificationReport, rederive_pass

__all__ = [
    "BridgeConfig",
    "MODEL_NAMES",
    "PathEnsemble",
    "VerificationReport",
    "adjoint_system",
    "cc_distance",
    "cc_distance_batch",
    "distance_compare_fit",
    "girsanov_weight",
    "hormander_level",
    "lie_bracket",
    "make_model",
    "rederive_pass",
    "simulate_bridge",
    "simulate_diffusion",
]
