"""Acceptance suite: one test per release criterion, one printed verdict each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  Each test pins its tolerances inline; nothing is deferred to later
calibration.
"""

import json
import math
import threading
import time

import numpy as np
import pytest

from flcore import rng
from flcore.algorithms import fedavg_local, iceadmm_local, iiadmm_local, inexact_step, prox_closed_form
from flcore.cli import main
from flcore.config import build_data, parse_config
from flcore.errors import ProtocolError
from flcore.models import Batch, ModelSpec, grad_check, loss_and_grad, param_count
from flcore.privacy import laplace_sample, noise_stream
from flcore.runner import epsilon_sweep, train
from flcore.transport import (
    DONE,
    Envelope,
    InProcessCarrier,
    TcpServerCarrier,
    decode_envelope,
    encode_envelope,
    encode_vector,
)
from flcore.worker import build_workers, run_client


def verdict(num: int, text: str) -> None:
    print(f"\nACCEPTANCE {num:02d} PASS: {text}")


# -- 1: gradient correctness --------------------------------------------------


def test_criterion_01_gradient_correctness():
    specs = [
        ModelSpec("linear-regression", 6),
        ModelSpec("softmax", 4, 3),
        ModelSpec("mlp1", 4, 3, 5),
    ]
    begin = time.perf_counter()
    worst = 0.0
    for spec in specs:
        m = param_count(spec)
        for i in range(100):
            gen = rng.stream("acceptance-grad", spec.kind, i)
            params = gen.normal(size=m)
            x = gen.normal(size=(6, spec.input_dim))
            labels = gen.integers(0, spec.output_dim, 6) if spec.is_classifier else gen.normal(size=6)
            report = grad_check(spec, params, Batch(x, labels), h=1e-6, tol=1e-4)
            worst = max(worst, report.max_rel_err)
            assert report.passed, f"{spec.kind} instance {i}: rel err {report.max_rel_err}"
    elapsed = time.perf_counter() - begin
    assert elapsed < 30.0, f"took {elapsed:.1f}s, budget is 30s"
    verdict(1, f"3x100 gradient checks, max rel err {worst:.2e} <= 1e-4 in {elapsed:.1f}s")


# -- 2: closed-form identity ---------------------------------------------------


def test_criterion_02_closed_form_identity():
    worst = 0.0
    for i in range(10_000):
        gen = rng.stream("acceptance-identity", i)
        z, g, lam, w = (gen.normal(size=4) for _ in range(4))
        rho = float(gen.uniform(0.05, 10.0))
        zeta = float(gen.uniform(0.0, 10.0))
        a = inexact_step(z, g, lam, rho, zeta, w)
        b = prox_closed_form(z, g, lam, rho, zeta, w)
        worst = max(worst, float(np.max(np.abs(a - b))))
        assert worst <= 1e-12, f"instance {i}: {worst}"
    verdict(2, f"both update forms agree over 10^4 inputs, max gap {worst:.2e} <= 1e-12")


# -- 3: FedAvg reduction -------------------------------------------------------


def test_criterion_03_fedavg_reduction():
    spec = ModelSpec("softmax", 3, 3)
    m = param_count(spec)
    worst = 0.0
    for i in range(100):
        gen = rng.stream("acceptance-reduction", i)
        w = gen.normal(size=m)
        x = gen.normal(size=(8, 3))
        y = gen.integers(0, 3, 8)
        batch = Batch(x, y)
        eta = float(gen.uniform(0.01, 1.0))
        grad_fn = lambda z, b: loss_and_grad(spec, z, b)[1]
        fedavg = fedavg_local(w, eta, 0.0, 1, lambda e: [batch], grad_fn)
        iiadmm = iiadmm_local(w, np.zeros(m), 1.0 / eta, 0.0, 1, lambda e: [batch], grad_fn)
        iceadmm_z, _ = iceadmm_local(w.copy(), np.zeros(m), w, 1.0 / eta, 0.0, 1, batch, grad_fn)
        worst = max(worst, float(np.max(np.abs(iiadmm - fedavg))), float(np.max(np.abs(iceadmm_z - fedavg))))
        assert worst <= 1e-12, f"instance {i}: {worst}"
    verdict(3, f"IIADMM and ICEADMM collapse to FedAvg, max gap {worst:.2e} <= 1e-12")


# -- 4: dual mirroring under noise ----------------------------------------------


def test_criterion_04_dual_mirroring():
    cfg = parse_config(
        {
            "model": {"kind": "softmax", "input_dim": 2, "output_dim": 3},
            "algo": {"kind": "iiadmm", "rho": 2.0, "zeta": 0.5, "local_steps": 5, "batch_size": 32, "rounds": 50},
            "privacy": {"enabled": True, "epsilon_bar": 10, "clip": 1.0},
            "data": {"source": "synthetic-blobs", "n": 200, "input_dim": 2, "classes": 3, "noise": 0.4},
            "run": {"clients": 4, "seed": 17},
        }
    )
    carrier = InProcessCarrier(build_workers(cfg))
    rounds_checked = []

    def hook(t, w, duals, c):
        for p, worker in enumerate(c.workers):
            assert np.array_equal(duals[p], worker.lam), f"round {t}, client {p}: duals diverged"
        rounds_checked.append(t)

    train(cfg, carrier=carrier, on_round_end=hook)
    assert rounds_checked == list(range(1, 51))
    verdict(4, "server and client duals bitwise equal for 50 DP rounds x 4 clients")


# -- 5: convex oracle convergence ------------------------------------------------


def test_criterion_05_convex_convergence():
    def convex_cfg(algo):
        return parse_config(
            {
                "model": {"kind": "linear-regression", "input_dim": 5},
                "algo": algo,
                "data": {
                    "source": "synthetic-regression",
                    "n": 400,
                    "input_dim": 5,
                    "noise": 0.0,
                    "test_fraction": 0.0,
                    "partition": "equal",
                },
                "run": {"clients": 4, "seed": 42},
            }
        )

    tuned = {
        "fedavg": {"kind": "fedavg", "eta": 0.3, "beta": 0.0, "local_steps": 1, "batch_size": 400, "rounds": 200},
        "iiadmm": {"kind": "iiadmm", "rho": 2.0, "zeta": 0.1, "local_steps": 10, "batch_size": 400, "rounds": 200},
        "iceadmm": {"kind": "iceadmm", "rho": 2.0, "zeta": 1.0, "local_steps": 10, "rounds": 200},
    }

    train_data, _, _ = build_data(convex_cfg(tuned["fedavg"]))
    design = np.hstack([train_data.inputs, np.ones((train_data.size, 1))])
    w_ls, *_ = np.linalg.lstsq(design, train_data.labels, rcond=None)  # independent oracle

    summary = []
    for kind, algo in tuned.items():
        begin = time.perf_counter()
        record = train(convex_cfg(algo))
        elapsed = time.perf_counter() - begin
        err = float(np.max(np.abs(record.final_w - w_ls)))
        assert err < 1e-4, f"{kind}: ||w - w_LS||_inf = {err}"
        assert elapsed < 10.0, f"{kind}: took {elapsed:.1f}s, budget is 10s"
        if kind != "fedavg":
            residual = record.metrics[-1].consensus_residual
            assert residual < 1e-3, f"{kind}: consensus residual {residual}"
        summary.append(f"{kind} err={err:.1e} in {elapsed:.1f}s")
    verdict(5, "; ".join(summary))


# -- 6: communication efficiency --------------------------------------------------


def test_criterion_06_communication_efficiency():
    def run_payload(kind: str, m: int) -> int:
        algo = {"kind": kind, "rho": 1.0, "zeta": 0.5, "eta": 0.01, "local_steps": 1, "batch_size": 64, "rounds": 2}
        cfg = parse_config(
            {
                "model": {"kind": "linear-regression", "input_dim": m - 1},
                "algo": algo,
                "data": {
                    "source": "synthetic-regression",
                    "n": 8,
                    "input_dim": m - 1,
                    "noise": 0.1,
                    "test_fraction": 0.0,
                },
                "run": {"clients": 2, "seed": 1},
            }
        )
        record = train(cfg)
        per_round = {mt.payload_bytes_up for mt in record.metrics}
        assert len(per_round) == 1, "payload bytes must be constant across rounds"
        return per_round.pop()

    for m in (10, 1000, 100_000):
        iiadmm = run_payload("iiadmm", m)
        iceadmm = run_payload("iceadmm", m)
        fedavg = run_payload("fedavg", m)
        assert iiadmm == 2 * (8 + 8 * m), f"m={m}: iiadmm payload {iiadmm}"
        assert iceadmm == 2 * iiadmm, f"m={m}: iceadmm {iceadmm} != 2x iiadmm {iiadmm}"
        assert fedavg == iiadmm, f"m={m}: fedavg {fedavg} != iiadmm {iiadmm}"
    verdict(6, "measured upstream payload: iceadmm = 2 x iiadmm and fedavg = iiadmm for m in {10, 1000, 100000}")


# -- 7: privacy/accuracy trend -----------------------------------------------------


def test_criterion_07_dp_trend():
    cfg = parse_config(
        {
            "model": {"kind": "softmax", "input_dim": 2, "output_dim": 3},
            "algo": {"kind": "iiadmm", "rho": 1.0, "zeta": 0.0, "local_steps": 10, "batch_size": 64, "rounds": 50},
            "privacy": {"enabled": True, "epsilon_bar": "inf", "clip": 2.0},
            "data": {"source": "synthetic-blobs", "n": 400, "input_dim": 2, "classes": 3, "noise": 0.6},
            "run": {"clients": 4, "seed": 0, "eval_every": 50},
        }
    )
    begin = time.perf_counter()
    rows = epsilon_sweep(cfg, [3.0, 5.0, 10.0, math.inf], seeds=list(range(10)))
    elapsed = time.perf_counter() - begin
    assert elapsed < 300.0, f"sweep took {elapsed:.0f}s, budget is 5 min"

    means = [row["mean_accuracy"] for row in rows]
    stds = [row["std_accuracy"] for row in rows]
    pooled = float(np.sqrt(np.mean(np.square(stds))))
    gap = means[-1] - means[0]
    assert gap >= 0.02, f"accuracy(inf) - accuracy(3) = {gap:.4f} < 2 percentage points"
    for lo, hi in zip(means, means[1:]):
        assert hi >= lo - pooled, f"means not non-decreasing within pooled std: {means}, pooled {pooled:.4f}"
    verdict(
        7,
        f"mean accuracy over eps (3,5,10,inf) = {[f'{v:.3f}' for v in means]}, gap {gap:.3f} >= 0.02, pooled std {pooled:.3f}, {elapsed:.0f}s",
    )


# -- 8: Laplace sampler ---------------------------------------------------------------


def test_criterion_08_laplace_sampler():
    from scipy import stats

    samples = laplace_sample(1.0, 1_000_000, noise_stream(123, 0, 1))
    mean = float(samples.mean())
    mav = float(np.abs(samples).mean())
    assert abs(mean) < 0.01, f"|mean| = {abs(mean)}"
    assert abs(mav - 1.0) < 0.01, f"mean |x| = {mav}, expected within 1% of b=1"

    ks = stats.kstest(laplace_sample(1.0, 100_000, noise_stream(321, 0, 1)), "laplace", args=(0.0, 1.0)).statistic
    assert ks < 0.01, f"KS statistic {ks}"
    verdict(8, f"10^6 samples: mean {mean:+.4f}, E|x| {mav:.4f}; KS {ks:.4f} < 0.01")


# -- 9: wire protocol -----------------------------------------------------------------


def test_criterion_09_wire_protocol():
    golden = bytes.fromhex("464c4d50" "01" "04" "00000000" "00000000" "0000000000000000")
    assert encode_envelope(Envelope(DONE, 0, 0, b"")) == golden
    assert len(golden) == 22
    assert encode_vector(np.array([1.0])) == bytes.fromhex("0100000000000000" "000000000000f03f")

    gen = rng.stream("acceptance-wire", 0)
    for i in range(10_000):
        env = Envelope(
            kind=int(gen.integers(0, 6)),
            round_num=int(gen.integers(0, 2**32)),
            client_id=int(gen.integers(0, 2**32)),
            payload=gen.bytes(int(gen.integers(0, 128))),
        )
        assert decode_envelope(encode_envelope(env)) == env

    big = Envelope(3, 1, 2, gen.bytes(1 << 20))  # 1 MiB payload
    assert decode_envelope(encode_envelope(big)) == big

    frame = encode_envelope(Envelope(3, 9, 1, encode_vector(np.arange(8.0))))
    fuzz_count = 0
    for cut in range(len(frame)):
        with pytest.raises(ProtocolError):
            decode_envelope(frame[:cut])
        fuzz_count += 1
    for i in range(2_000):
        blob = bytearray(frame)
        for _ in range(int(gen.integers(1, 4))):
            blob[int(gen.integers(0, len(blob)))] = int(gen.integers(0, 256))
        try:
            decode_envelope(bytes(blob))
        except ProtocolError:
            pass  # the only exception the codec may raise
        fuzz_count += 1
    verdict(9, f"golden frames exact; 10^4 roundtrips; {fuzz_count} malformed inputs all ProtocolError or decoded")


# -- 10: carrier invariance --------------------------------------------------------------


CARRIER_CONFIG = {
    "model": {"kind": "softmax", "input_dim": 2, "output_dim": 3},
    "algo": {"kind": "iiadmm", "rho": 2.0, "zeta": 0.5, "local_steps": 5, "batch_size": 32, "rounds": 20},
    "privacy": {"enabled": True, "epsilon_bar": 10, "clip": 1.0},
    "data": {"source": "synthetic-blobs", "n": 240, "input_dim": 2, "classes": 3, "noise": 0.4},
    "run": {"clients": 4, "seed": 29},
}


def test_criterion_10_carrier_invariance(tmp_path):
    cfg = parse_config(CARRIER_CONFIG)
    inproc_path = tmp_path / "inproc.jsonl"
    train(cfg, metrics_path=str(inproc_path))

    tcp_path = tmp_path / "tcp.jsonl"
    carrier = TcpServerCarrier("127.0.0.1:0", cfg.clients, handshake_timeout_s=30.0)
    port = carrier.address[1]
    failures = []

    def client(cid):
        try:
            run_client(f"127.0.0.1:{port}", cid, cfg)
        except Exception as exc:
            failures.append((cid, exc))

    threads = [threading.Thread(target=client, args=(cid,)) for cid in range(cfg.clients)]
    for t in threads:
        t.start()
    train(cfg, carrier=carrier, metrics_path=str(tcp_path))
    for t in threads:
        t.join(timeout=60.0)

    assert not failures, f"client failures: {failures}"
    assert inproc_path.read_bytes() == tcp_path.read_bytes()
    lines = inproc_path.read_text().splitlines()
    assert len(lines) == 20
    verdict(10, "P=4, T=20 with DP: in-process and localhost-TCP metrics files byte-identical")


# -- 11: determinism -----------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(CARRIER_CONFIG))
    outs = {}
    for name, flags in {
        "serial_a": ["--parallel", "false"],
        "serial_b": ["--parallel", "false"],
        "parallel_a": ["--parallel", "true"],
        "parallel_b": ["--parallel", "true"],
    }.items():
        out = tmp_path / f"{name}.jsonl"
        assert main(["simulate", "--config", str(cfg_path), "--out", str(out), *flags]) == 0
        outs[name] = out.read_bytes()
    assert outs["serial_a"] == outs["serial_b"] == outs["parallel_a"] == outs["parallel_b"]
    assert len(outs["serial_a"].splitlines()) == 20
    verdict(11, "repeated simulate runs (serial and --parallel true) byte-identical")
