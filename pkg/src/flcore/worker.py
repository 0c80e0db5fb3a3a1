"""Client-side engine: one object per client, one method call per round.

The same ClientWorker runs behind both carriers.  In-process, the carrier
calls it directly; over TCP, ``run_client`` wraps it in the JOIN /
GLOBAL_MODEL / LOCAL_UPDATE / DONE state machine.  Every update the worker
produces is a pure function of (config, seed, client id, round), which is
what makes runs carrier-invariant and repeatable.
"""

from __future__ import annotations

import logging

import numpy as np

from . import algorithms, transport
from .config import RunConfig, build_data
from .data import BatchPlan, Dataset, batches
from .errors import ConfigError, FlcoreError, NumericError, ProtocolError, TransportError
from .models import Batch, loss_and_grad
from .privacy import NoiseSpec, noise_stream, perturb_output, sensitivity

log = logging.getLogger("flcore.worker")


class ClientWorker:
    def __init__(self, config: RunConfig, client_id: int, local_data: Dataset):
        if not 0 <= client_id < config.clients:
            raise ConfigError(f"client id {client_id} out of range for {config.clients} clients")
        if local_data.size < 1:
            raise ConfigError(f"client {client_id} has no local data")
        self.config = config
        self.client_id = client_id
        self.local = local_data
        self.plan = BatchPlan(batch_size=config.algo.batch_size, shuffle_seed=config.seed)
        self.rounds = config.algo.rounds
        self.z: np.ndarray | None = None
        self.lam: np.ndarray | None = None

    # -- handshake -----------------------------------------------------------

    def handle_join_ack(self, session: transport.SessionConfig) -> None:
        """Adopt the server-authoritative session header, refusing any mismatch."""
        if session.model != self.config.model:
            raise ConfigError(
                f"server model {session.model} does not match local config {self.config.model}"
            )
        if session.algo_kind != self.config.algo.kind:
            raise ConfigError(
                f"server runs {session.algo_kind!r} but local config says {self.config.algo.kind!r}"
            )
        self.rounds = session.rounds
        # Both ADMM variants start z and lambda from the shared initial model.
        self.z = session.initial_w.copy()
        self.lam = np.zeros_like(session.initial_w)

    # -- per-round update ------------------------------------------------------

    def _grad_fn(self):
        spec = self.config.model

        def grad(z: np.ndarray, batch: Batch) -> np.ndarray:
            return loss_and_grad(spec, z, batch)[1]

        return grad

    def _clip_c(self) -> float | None:
        return self.config.privacy.clip_c if self.config.privacy.enabled else None

    def _perturb(self, z: np.ndarray, round_num: int, rho_t: float) -> np.ndarray:
        privacy = self.config.privacy
        if not privacy.is_private:
            return z
        algo = self.config.algo
        delta = sensitivity(algo.kind, privacy.clip_c, rho_t, algo.zeta, algo.eta)
        spec = NoiseSpec.for_run(privacy, delta)
        return perturb_output(z, spec, noise_stream(self.config.seed, self.client_id, round_num))

    def handle_global(self, round_num: int, w: np.ndarray) -> list[np.ndarray]:
        """One local round; returns the payload vectors to communicate."""
        if self.lam is None or self.z is None:
            raise TransportError(f"client {self.client_id} received a model before JOIN_ACK")
        algo = self.config.algo
        rho_t = algo.rho_at(round_num)
        grad = self._grad_fn()
        clip = self._clip_c()
        all_idx = np.arange(self.local.size)
        try:
            if algo.kind == "fedavg":
                z_new = algorithms.fedavg_local(
                    w,
                    algo.eta,
                    algo.beta,
                    algo.local_steps,
                    lambda epoch: batches(self.local, all_idx, self.plan, self.client_id, round_num, epoch),
                    grad,
                    clip,
                )
                return [self._perturb(z_new, round_num, rho_t)]
            if algo.kind == "iiadmm":
                # One split per round, reused across the L local epochs.
                fixed = batches(self.local, all_idx, self.plan, self.client_id, round_num, 0)
                z_new = algorithms.iiadmm_local(
                    w, self.lam, rho_t, algo.zeta, algo.local_steps, lambda epoch: fixed, grad, clip
                )
                z_out = self._perturb(z_new, round_num, rho_t)
                # Mirrored dual step: the server applies the same formula to the
                # same communicated value, so both sides stay bitwise equal.
                self.lam = algorithms.dual_update(self.lam, rho_t, w, z_out)
                return [z_out]
            # iceadmm: full batch, state carries over between rounds.
            full = Batch(self.local.inputs, self.local.labels)
            self.z, self.lam = algorithms.iceadmm_local(
                self.z, self.lam, w, rho_t, algo.zeta, algo.local_steps, full, grad, clip
            )
            return [self._perturb(self.z, round_num, rho_t), self.lam]
        except NumericError as exc:
            raise NumericError(f"client {self.client_id}, round {round_num}: {exc}") from exc

    def handle_done(self, env: transport.Envelope) -> None:
        log.debug("client %d done after %d rounds", self.client_id, self.rounds)


def build_workers(config: RunConfig) -> list[ClientWorker]:
    """All P workers for an in-process run, sharing one materialized dataset."""
    train, _, part = build_data(config)
    return [
        ClientWorker(config, cid, train.subset(part.assignments[cid]))
        for cid in range(config.clients)
    ]


def build_worker(config: RunConfig, client_id: int) -> ClientWorker:
    """One worker for a remote client; re-derives the shared partition."""
    train, _, part = build_data(config)
    if client_id >= len(part.assignments):
        raise ConfigError(f"client id {client_id} out of range for {config.clients} clients")
    return ClientWorker(config, client_id, train.subset(part.assignments[client_id]))


def run_client(addr: str, client_id: int, config: RunConfig, timeout_s: float | None = None) -> None:
    """TCP client main loop: join, answer every round, stop on DONE."""
    channel = transport.TcpClientChannel(addr, client_id, timeout_s or config.timeout_s)
    try:
        session = channel.join()
        worker = build_worker(config, client_id)
        worker.handle_join_ack(session)
        while True:
            env = channel.recv()
            if env.kind == transport.DONE:
                worker.handle_done(env)
                return
            if env.kind == transport.ERROR:
                raise TransportError(f"server error: {env.payload.decode('utf-8', 'replace')}")
            if env.kind != transport.GLOBAL_MODEL:
                raise ProtocolError(f"unexpected {transport.KIND_NAMES[env.kind]} frame mid-session")
            vectors = transport.decode_vectors(env.payload)
            if len(vectors) != 1:
                raise ProtocolError("GLOBAL_MODEL must carry exactly one vector")
            try:
                arrays = worker.handle_global(env.round_num, vectors[0])
            except FlcoreError as exc:
                channel.send_error(env.round_num, str(exc))
                raise
            channel.send_update(env.round_num, arrays)
    finally:
        channel.close()
