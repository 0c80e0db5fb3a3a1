"""The T-round training loop, validation, metrics emission, and epsilon sweeps.

Each round: broadcast w, gather every client's update in id order, apply the
dual step (IIADMM) and then the global aggregate, validate, append one metrics
line.  The metrics file is a deterministic record: with a fixed config and
seed, two runs (on either carrier) produce byte-identical files.  Wall-clock
timings are therefore kept in memory only (RunRecord / bench); the file writes
their schema keys with 0.0.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .algorithms import dual_update, fedavg_global, iceadmm_global, iiadmm_global
from .config import RunConfig, build_data
from .data import Dataset
from .errors import ConfigError, FlcoreError, ProtocolError
from .models import Batch, ModelSpec, init_params, loss_and_grad, param_count, predict
from .privacy import NoiseSpec, dp_budget_report, sensitivity
from .transport import InProcessCarrier, RoundMetrics, SessionConfig, decode_vectors
from .worker import ClientWorker

log = logging.getLogger("flcore.runner")

METRIC_KEYS = (
    "round",
    "train_loss",
    "test_acc",
    "consensus_residual",
    "bytes_up",
    "bytes_down",
    "payload_bytes_up",
    "t_local_ms",
    "t_comm_ms",
    "t_global_ms",
)


@dataclass
class RunRecord:
    metrics: list[RoundMetrics]
    final_w: np.ndarray
    dp_report: dict


def metrics_line(m: RoundMetrics) -> str:
    """One JSON metrics line.

    Timing keys are part of the schema but are written as 0.0: wall clock is
    not a function of (config, seed) and would break the byte-reproducibility
    of the file.  Measured timings stay on the in-memory RoundMetrics.
    """
    obj = {
        "round": m.round_num,
        "train_loss": m.train_loss,
        "test_acc": m.test_accuracy,
        "consensus_residual": m.consensus_residual,
        "bytes_up": m.bytes_up,
        "bytes_down": m.bytes_down,
        "payload_bytes_up": m.payload_bytes_up,
        "t_local_ms": 0.0,
        "t_comm_ms": 0.0,
        "t_global_ms": 0.0,
    }
    return json.dumps(obj)


def validate(spec: ModelSpec, params: np.ndarray, test_data: Dataset) -> tuple[float, float | None]:
    """Mean loss and (for classifiers) argmax accuracy on held-out data."""
    if test_data.size == 0:
        raise ConfigError("validation requires a nonempty test set")
    loss, _ = loss_and_grad(spec, params, Batch(test_data.inputs, test_data.labels))
    accuracy = None
    if spec.is_classifier:
        accuracy = float(np.mean(predict(spec, params, test_data.inputs) == test_data.labels))
    return loss, accuracy


def _dp_report(cfg: RunConfig) -> dict:
    algo, privacy = cfg.algo, cfg.privacy
    if not privacy.enabled:
        return dp_budget_report(privacy, NoiseSpec(delta_bar=0.0, scale_b=0.0), algo.rounds)
    delta = sensitivity(algo.kind, privacy.clip_c, algo.rho_at(1), algo.zeta, algo.eta)
    return dp_budget_report(privacy, NoiseSpec.for_run(privacy, delta), algo.rounds)


def train(
    config: RunConfig,
    carrier=None,
    parallel: bool = False,
    metrics_path: str | None = None,
    on_round_end=None,
) -> RunRecord:
    """Run the full federation; returns the per-round record and final model.

    With carrier=None an in-process carrier is built from the config.  A
    pre-started TCP carrier may be passed instead; the trajectory is the same
    either way.  ``on_round_end(t, w, duals, z_list, carrier)`` is a test hook.
    """
    config.validate()
    spec, algo, privacy = config.model, config.algo, config.privacy
    m = param_count(spec)
    train_data, test_data, part = build_data(config)
    views = [train_data.subset(idx) for idx in part.assignments]
    weights = [view.size / train_data.size for view in views]

    w = init_params(spec, rng.stream("init", config.seed))
    duals = [np.zeros(m) for _ in range(config.clients)]
    session = SessionConfig(model=spec, algo_kind=algo.kind, initial_w=w, rounds=algo.rounds)

    if carrier is None:
        carrier = InProcessCarrier(
            [ClientWorker(config, cid, views[cid]) for cid in range(config.clients)],
            parallel=parallel,
        )

    record = RunRecord(metrics=[], final_w=w, dp_report=_dp_report(config))
    writer = open(metrics_path, "w") if metrics_path else None
    try:
        carrier.start(session)
        for t in range(1, algo.rounds + 1):
            try:
                w, duals, metrics = _run_round(config, carrier, t, w, duals, weights, views, test_data)
            except FlcoreError as exc:
                raise type(exc)(f"round {t}: {exc}") from exc
            record.metrics.append(metrics)
            record.final_w = w
            if writer:
                writer.write(metrics_line(metrics) + "\n")
                writer.flush()
            if on_round_end is not None:
                on_round_end(t, w, duals, carrier)
        carrier.finish()
    except BaseException:
        carrier.close()
        raise
    finally:
        if writer:
            writer.close()
    return record


def _run_round(config, carrier, t, w, duals, weights, views, test_data):
    spec, algo = config.model, config.algo
    m = param_count(spec)
    rho_t = algo.rho_at(t)

    carrier.reset_round_bytes()
    t0 = time.perf_counter()
    carrier.broadcast_model(t, w)
    t1 = time.perf_counter()
    envelopes = carrier.gather_updates(t, config.timeout_s)
    t2 = time.perf_counter()

    expected = 2 if algo.kind == "iceadmm" else 1
    z_list, lam_list = [], []
    for env in envelopes:
        vectors = decode_vectors(env.payload)
        if len(vectors) != expected:
            raise ProtocolError(
                f"client {env.client_id} sent {len(vectors)} vectors, {algo.kind} expects {expected}"
            )
        if any(v.shape[0] != m for v in vectors):
            raise ProtocolError(f"client {env.client_id} sent a vector of the wrong dimension")
        z_list.append(vectors[0])
        if expected == 2:
            lam_list.append(vectors[1])

    # Dual step first: the aggregate pairs each fresh z with its fresh dual.
    if algo.kind == "iiadmm":
        for p in range(len(duals)):
            duals[p] = dual_update(duals[p], rho_t, w, z_list[p])
        w_new = iiadmm_global(z_list, duals, rho_t)
    elif algo.kind == "iceadmm":
        w_new = iceadmm_global(z_list, lam_list, rho_t)
    else:
        w_new = fedavg_global(z_list, weights)
    t3 = time.perf_counter()

    train_loss = 0.0
    residual = 0.0
    for p, view in enumerate(views):
        loss, _ = loss_and_grad(spec, z_list[p], Batch(view.inputs, view.labels))
        train_loss += weights[p] * loss
        residual = max(residual, float(np.max(np.abs(w_new - z_list[p]))))

    test_loss = test_acc = None
    if test_data.size and (t % config.eval_every == 0 or t == algo.rounds):
        test_loss, test_acc = validate(spec, w_new, test_data)

    compute_s = getattr(carrier, "last_compute_s", None)
    if compute_s is not None:
        t_local_ms = compute_s * 1e3
        t_comm_ms = max(0.0, (t2 - t0) - compute_s) * 1e3
    else:
        t_local_ms = (t2 - t1) * 1e3
        t_comm_ms = (t1 - t0) * 1e3

    rb = carrier.round_bytes
    metrics = RoundMetrics(
        round_num=t,
        train_loss=train_loss,
        test_accuracy=test_acc,
        test_loss=test_loss,
        consensus_residual=residual,
        bytes_up=rb.bytes_up,
        bytes_down=rb.bytes_down,
        payload_bytes_up=rb.payload_bytes_up,
        t_local_ms=t_local_ms,
        t_comm_ms=t_comm_ms,
        t_global_ms=(t3 - t2) * 1e3,
    )
    return w_new, duals, metrics


def final_accuracy(record: RunRecord) -> float:
    """Last evaluated test accuracy of a run."""
    for m in reversed(record.metrics):
        if m.test_accuracy is not None:
            return m.test_accuracy
    raise ConfigError("run produced no test accuracy (regression model or empty test set)")


def epsilon_sweep(base_config: RunConfig, eps_list, seeds, parallel: bool = False) -> list[dict]:
    """Final accuracy per privacy budget, averaged over seeds.

    Privacy is force-enabled for every run so the budget is the only thing
    changing; duplicate budgets are dropped with a warning.
    """
    if not eps_list:
        raise ConfigError("epsilon sweep needs at least one budget")
    if not seeds:
        raise ConfigError("epsilon sweep needs at least one seed")
    unique = []
    for eps in eps_list:
        if eps in unique:
            log.warning("duplicate epsilon %s dropped from sweep", eps)
        else:
            unique.append(eps)

    rows = []
    for eps in unique:
        accuracies = []
        for seed in seeds:
            cfg = replace(
                base_config,
                seed=int(seed),
                privacy=replace(base_config.privacy, enabled=True, epsilon_bar=float(eps)),
            )
            accuracies.append(final_accuracy(train(cfg, parallel=parallel)))
        rows.append(
            {
                "epsilon": float(eps),
                "seeds": [int(s) for s in seeds],
                "accuracies": accuracies,
                "mean_accuracy": float(np.mean(accuracies)),
                "std_accuracy": float(np.std(accuracies)),
            }
        )
    return rows


def write_sweep_csv(rows: list[dict], path: str) -> None:
    """Plot-ready long-form CSV: one (epsilon, seed, accuracy) point per line."""
    with open(path, "w") as f:
        f.write("epsilon,seed,final_accuracy\n")
        for row in rows:
            eps = "inf" if math.isinf(row["epsilon"]) else repr(row["epsilon"])
            for seed, acc in zip(row["seeds"], row["accuracies"]):
                f.write(f"{eps},{seed},{acc!r}\n")
