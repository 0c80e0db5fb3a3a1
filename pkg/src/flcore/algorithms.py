"""Server and client update rules for FedAvg, ICEADMM, and IIADMM.

The consensus formulation keeps a global vector w on the server and a local
pair (z_p, lambda_p) per client.  Each round the server broadcasts w, clients
take L local steps, and the server aggregates:

* FedAvg    -- local SGD with momentum from w; global weighted average of z_p.
* ICEADMM   -- L full-batch linearized-proximal primal steps, each followed by
               a dual step; both z_p and lambda_p travel to the server.
* IIADMM    -- L epochs of batched linearized-proximal steps starting from the
               broadcast w; the dual step runs independently on client AND
               server from the same inputs, so only z_p travels.

All updates are pure functions; the caller owns state and scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .privacy import clip_gradient

ALGO_KINDS = ("fedavg", "iceadmm", "iiadmm")

# grad_fn(z, batch) -> raw batch-mean gradient at z
GradFn = Callable[[np.ndarray, object], np.ndarray]
# epoch_batches(epoch) -> the batch sequence for that epoch
EpochBatches = Callable[[int], Sequence[object]]


@dataclass(frozen=True)
class AlgoConfig:
    kind: str
    rho: float = 1.0
    zeta: float = 0.0
    eta: float = 0.1
    beta: float = 0.0
    local_steps: int = 1
    batch_size: int = 64
    rounds: int = 1
    # Optional geometric penalty schedule; gamma=1 keeps rho constant.
    rho_gamma: float = 1.0
    rho_max: float = float("inf")

    def validate(self) -> None:
        if self.kind not in ALGO_KINDS:
            raise ConfigError(f"unknown algorithm kind {self.kind!r}; expected one of {ALGO_KINDS}")
        if self.kind == "fedavg":
            if self.eta <= 0:
                raise ConfigError(f"fedavg needs a positive step size, got {self.eta}")
            if not 0.0 <= self.beta < 1.0:
                raise ConfigError(f"momentum must lie in [0, 1), got {self.beta}")
        else:
            if self.rho <= 0:
                raise ConfigError(f"{self.kind} needs rho > 0, got {self.rho}")
            if self.zeta < 0:
                raise ConfigError(f"zeta must be nonnegative, got {self.zeta}")
        if self.local_steps < 1:
            raise ConfigError(f"local_steps must be positive, got {self.local_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be nonnegative, got {self.rounds}")
        if self.rho_gamma < 1.0:
            raise ConfigError(f"rho_gamma must be >= 1, got {self.rho_gamma}")

    def rho_at(self, round_num: int) -> float:
        """Penalty for a 1-based round under the (optional) geometric schedule."""
        if self.rho_gamma == 1.0:
            return self.rho
        return min(self.rho_max, self.rho * self.rho_gamma ** (round_num - 1))


@dataclass
class ClientState:
    client_id: int
    z: np.ndarray
    lam: np.ndarray
    round_num: int = 0


@dataclass
class ServerState:
    w: np.ndarray
    duals: list[np.ndarray] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    round_num: int = 0


def _same_dim(*vectors: np.ndarray) -> None:
    dims = {v.shape for v in vectors}
    if len(dims) > 1:
        raise ShapeError(f"vector dimensions disagree: {sorted(dims)}")


def inexact_step(z, g, lam, rho, zeta, w):
    """One linearized proximal step: z - (g - lam - rho*(w - z)) / (rho + zeta)."""
    return z - (g - lam - rho * (w - z)) / (rho + zeta)


def prox_closed_form(z, g, lam, rho, zeta, w):
    """The algebraically identical closed form (zeta*z + rho*w + lam - g)/(rho+zeta)."""
    return (zeta * z + rho * w + lam - g) / (rho + zeta)


def dual_update(lam: np.ndarray, rho: float, w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """lam + rho * (w - z); run identically on server and client for IIADMM."""
    _same_dim(lam, w, z)
    return lam + rho * (w - z)


def _clipped(grad_fn: GradFn, z: np.ndarray, batch, clip_c: float | None) -> np.ndarray:
    g = grad_fn(z, batch)
    if clip_c is not None:
        g = clip_gradient(g, clip_c)
    return g


def iiadmm_local(
    w: np.ndarray,
    lam: np.ndarray,
    rho: float,
    zeta: float,
    local_epochs: int,
    epoch_batches: EpochBatches,
    grad_fn: GradFn,
    clip_c: float | None = None,
) -> np.ndarray:
    """Batched local primal update starting from the broadcast w.

    Runs ``local_epochs`` passes over the epoch's batches, applying the
    linearized proximal step per batch.  The dual step is NOT taken here; the
    caller applies it (mirrored on the server) to the communicated z.
    """
    _same_dim(w, lam)
    z = w.copy()
    for epoch in range(1, local_epochs + 1):
        for b, batch in enumerate(epoch_batches(epoch)):
            g = _clipped(grad_fn, z, batch, clip_c)
            z = inexact_step(z, g, lam, rho, zeta, w)
            if not np.all(np.isfinite(z)):
                raise NumericError(f"non-finite iterate at local epoch {epoch}, batch {b}")
    return z


def iceadmm_local(
    z: np.ndarray,
    lam: np.ndarray,
    w: np.ndarray,
    rho: float,
    zeta: float,
    local_steps: int,
    full_batch,
    grad_fn: GradFn,
    clip_c: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """L alternating primal/dual steps on the full local batch.

    Continues from the client's own (z, lam); both move and both are
    communicated afterwards.
    """
    _same_dim(z, lam, w)
    for step in range(1, local_steps + 1):
        g = _clipped(grad_fn, z, full_batch, clip_c)
        z = prox_closed_form(z, g, lam, rho, zeta, w)
        lam = dual_update(lam, rho, w, z)
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(lam)):
            raise NumericError(f"non-finite iterate at local step {step}")
    return z, lam


def fedavg_local(
    w: np.ndarray,
    eta: float,
    beta: float,
    local_epochs: int,
    epoch_batches: EpochBatches,
    grad_fn: GradFn,
    clip_c: float | None = None,
) -> np.ndarray:
    """Local SGD with momentum; the velocity resets every round."""
    z = w.copy()
    velocity = np.zeros_like(w)
    for epoch in range(1, local_epochs + 1):
        for b, batch in enumerate(epoch_batches(epoch)):
            g = _clipped(grad_fn, z, batch, clip_c)
            velocity = beta * velocity + g
            z = z - eta * velocity
            if not np.all(np.isfinite(z)):
                raise NumericError(f"non-finite iterate at local epoch {epoch}, batch {b}")
    return z


def iiadmm_global(z_list: Sequence[np.ndarray], duals: Sequence[np.ndarray], rho: float) -> np.ndarray:
    """w = (1/P) * sum_p (z_p - duals_p / rho), with the server's own duals."""
    if rho <= 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    if len(z_list) != len(duals) or not z_list:
        raise ShapeError("need one dual per client update")
    _same_dim(*z_list, *duals)
    acc = np.zeros_like(z_list[0])
    for z, lam in zip(z_list, duals):
        acc += z - lam / rho
    return acc / len(z_list)


def iceadmm_global(z_list: Sequence[np.ndarray], lam_list: Sequence[np.ndarray], rho: float) -> np.ndarray:
    """Same aggregate as IIADMM but with the client-communicated duals."""
    return iiadmm_global(z_list, lam_list, rho)


def fedavg_global(z_list: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted average of the local models, weights summing to one."""
    if len(z_list) != len(weights) or not z_list:
        raise ShapeError("need one weight per client update")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"weights must sum to 1, got {sum(weights)}")
    _same_dim(*z_list)
    acc = np.zeros_like(z_list[0])
    for z, wt in zip(z_list, weights):
        acc += wt * z
    return acc
