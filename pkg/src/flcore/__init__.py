"""Federated consensus training with differential privacy.

Three round-synchronous algorithms (FedAvg, ICEADMM, IIADMM) over a pluggable
carrier: an in-process channel for simulation and a framed TCP protocol for
real server/client deployments.  Every run is a pure function of its config
and seed.
"""

__version__ = "0.1.0"

from .algorithms import AlgoConfig
from .config import RunConfig
from .models import ModelSpec
from .privacy import PrivacyConfig
from .runner import train

__all__ = ["AlgoConfig", "ModelSpec", "PrivacyConfig", "RunConfig", "train", "__version__"]
