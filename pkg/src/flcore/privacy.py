"""Per-round differential privacy: clipping, sensitivity, Laplace noise.

The mechanism is output perturbation: the client adds zero-mean Laplace noise
of scale b = sensitivity / epsilon to its outgoing parameter vector.  Clipping
the batch gradient to L2 norm C makes the sensitivity finite; epsilon may be
infinite, which means no noise.  The privacy guarantee is per communication
round; no composition across rounds is claimed, and the budget report says so
explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import noise_stream

__all__ = [
    "PrivacyConfig",
    "NoiseSpec",
    "clip_gradient",
    "sensitivity",
    "laplace_sample",
    "laplace_from_uniform",
    "perturb_output",
    "dp_budget_report",
    "noise_stream",
]


@dataclass(frozen=True)
class PrivacyConfig:
    enabled: bool = False
    epsilon_bar: float = math.inf
    clip_c: float = 1.0

    def validate(self) -> None:
        if self.enabled:
            if not self.epsilon_bar > 0:
                raise ConfigError(f"epsilon_bar must be positive, got {self.epsilon_bar}")
            if not self.clip_c > 0:
                raise ConfigError(f"clip_c must be positive, got {self.clip_c}")

    @property
    def is_private(self) -> bool:
        return self.enabled and math.isfinite(self.epsilon_bar)


@dataclass(frozen=True)
class NoiseSpec:
    """Sensitivity bound and the Laplace scale it implies."""

    delta_bar: float
    scale_b: float

    @staticmethod
    def for_run(cfg: PrivacyConfig, delta_bar: float) -> "NoiseSpec":
        if not cfg.is_private:
            return NoiseSpec(delta_bar=delta_bar, scale_b=0.0)
        return NoiseSpec(delta_bar=delta_bar, scale_b=delta_bar / cfg.epsilon_bar)


def clip_gradient(grad: np.ndarray, clip_c: float) -> np.ndarray:
    """Scale ``grad`` so its L2 norm is at most ``clip_c``; zero stays zero."""
    if clip_c <= 0:
        raise ConfigError(f"clip constant must be positive, got {clip_c}")
    norm = float(np.linalg.norm(grad))
    if norm <= clip_c:
        return grad
    return grad * (clip_c / norm)


def sensitivity(kind: str, clip_c: float, rho: float = 0.0, zeta: float = 0.0, eta: float = 0.0) -> float:
    """Worst-case change of the communicated update across neighbouring datasets.

    ADMM variants: 2C/(rho + zeta).  FedAvg: 2C*eta, the same bound under the
    substitution rho = 1/eta, zeta = 0.
    """
    if clip_c <= 0:
        raise ConfigError(f"clip constant must be positive, got {clip_c}")
    if kind == "fedavg":
        if eta <= 0:
            raise ConfigError("fedavg sensitivity needs a positive step size")
        return 2.0 * clip_c * eta
    if kind in ("iceadmm", "iiadmm"):
        if rho + zeta <= 0:
            raise ConfigError("sensitivity undefined for rho + zeta <= 0")
        return 2.0 * clip_c / (rho + zeta)
    raise ConfigError(f"unknown algorithm kind {kind!r}")


def laplace_from_uniform(u: np.ndarray, scale_b: float) -> np.ndarray:
    """Inverse-CDF transform: u in [0,1) -> Laplace(0, b), with sgn(0) = 0.

    The u = 0 endpoint would map to -inf; the log argument is floored at the
    smallest positive double so samples stay finite (a 2^-53 probability event).
    """
    shifted = u - 0.5
    arg = np.maximum(1.0 - 2.0 * np.abs(shifted), 5e-324)
    return -scale_b * np.sign(shifted) * np.log(arg)


def laplace_sample(scale_b: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw m iid Laplace(0, b) values from a counter-based stream; b=0 gives zeros."""
    if scale_b < 0:
        raise ConfigError(f"noise scale must be nonnegative, got {scale_b}")
    if scale_b == 0.0:
        return np.zeros(m)
    return laplace_from_uniform(rng.random(m), scale_b)


def perturb_output(values: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Add the output-perturbation noise; identity (bitwise) when b = 0."""
    if spec.scale_b == 0.0:
        return values
    return values + laplace_sample(spec.scale_b, values.shape[0], rng)


def dp_budget_report(cfg: PrivacyConfig, spec: NoiseSpec, rounds: int) -> dict:
    """Per-round privacy budget summary; deliberately claims no composition."""
    return {
        "non_private": not cfg.is_private,
        "per_round_epsilon": None if not cfg.is_private else cfg.epsilon_bar,
        "delta_bar": spec.delta_bar,
        "b": spec.scale_b,
        "rounds": rounds,
        "composition": "none claimed; the guarantee is per communication round",
    }
