"""Transfer and algorithm micro-benchmarks.

Each scenario reports ledger byte totals (deterministic) and wall-clock
seconds (informational only: a CPU simulation says nothing about PCIe
throughput).  Every function returns ``(rows, timings, violations)`` where
``violations`` lists the invariants that did not hold.
"""

from __future__ import annotations

import time
from typing import Dict, Optional

import numpy as np

from . import comm
from . import numerics as nm
from .runtime import DevGroup, create_environment
from .segvec import Blockwise, Clone, Natural, create_segmented
from .topology import PathKind, Topology

TRANSFER_COLUMNS = [
    "scenario",
    "devices",
    "payload_bytes",
    "host_to_device_bytes",
    "device_to_host_bytes",
    "peer_to_peer_bytes",
    "host_staged_bytes",
    "on_device_bytes",
    "transfers",
    "per_device_min_bytes",
    "per_device_max_bytes",
    "host_combines",
]

ALGO_COLUMNS = [
    "algorithm",
    "matrix_size",
    "devices",
    "matrices",
    "per_device_max_elements",
    "per_device_min_elements",
    "cross_device_bytes",
    "host_to_device_bytes",
]

TIMING_COLUMNS = ["benchmark", "scenario", "size", "devices", "seconds"]


def _ledger_row(ledger, scenario, g, payload, per_device):
    kinds = ledger.by_kind()
    return {
        "scenario": scenario,
        "devices": g,
        "payload_bytes": payload,
        "host_to_device_bytes": kinds[PathKind.HOST_TO_DEVICE].bytes,
        "device_to_host_bytes": kinds[PathKind.DEVICE_TO_HOST].bytes,
        "peer_to_peer_bytes": kinds[PathKind.PEER_TO_PEER].bytes,
        "host_staged_bytes": kinds[PathKind.HOST_STAGED].bytes,
        "on_device_bytes": kinds[PathKind.ON_DEVICE].bytes,
        "transfers": sum(t.count for t in kinds.values()),
        "per_device_min_bytes": min(per_device),
        "per_device_max_bytes": max(per_device),
        "host_combines": ledger.host_combines,
    }


def bench_transfer(
    max_devices: int,
    topology: Optional[Topology] = None,
    matrix_size: int = 256,
    matrices: int = 12,
    weak_per_device: int = 3,
    seed: int = 0,
):
    """Strong copy, weak copy, broadcast and reduce for G = 1 .. max_devices."""
    topo = topology or Topology.single(max_devices)
    rng = np.random.default_rng(seed)
    m = matrix_size * matrix_size
    item = np.dtype(np.complex64).itemsize
    rows, timings, violations = [], [], []
    weak_ref = None
    for g in range(1, max_devices + 1):
        with create_environment(topo.device_count, DevGroup(0, g), topo) as env:
            ledger = env.ledger

            def run(scenario, fn, payload, per_dev):
                ledger.reset()
                t0 = time.perf_counter()
                fn()
                env.barrier_fence()
                timings.append(
                    {"benchmark": "transfer", "scenario": scenario, "size": matrix_size,
                     "devices": g, "seconds": time.perf_counter() - t0}
                )
                row = _ledger_row(ledger, scenario, g, payload, per_dev(ledger))
                rows.append(row)
                return row

            def h2d_per_device(led):
                return [led.query(PathKind.HOST_TO_DEVICE, dst=r).bytes for r in env.ranks]

            # strong copy: a fixed number of matrices spread over g devices
            total = matrices * m
            host = _crand(rng, total)
            v = create_segmented(env, total, Natural())
            row = run("strong_copy", lambda: comm.scatter(host, v).wait(), total * item, h2d_per_device)
            if row["per_device_max_bytes"] - row["per_device_min_bytes"] > item:
                violations.append(f"strong_copy G={g}: per-device bytes differ by more than one element")
            if row["host_to_device_bytes"] != total * item:
                violations.append(f"strong_copy G={g}: total bytes {row['host_to_device_bytes']} != {total * item}")
            del v

            # weak copy: a fixed number of matrices per device
            wtotal = weak_per_device * g * m
            host = _crand(rng, wtotal)
            v = create_segmented(env, wtotal, Blockwise(m))
            row = run("weak_copy", lambda: comm.scatter(host, v).wait(), wtotal * item, h2d_per_device)
            per = row["per_device_max_bytes"]
            if row["per_device_min_bytes"] != per or (weak_ref is not None and per != weak_ref):
                violations.append(f"weak_copy G={g}: per-device bytes not constant")
            weak_ref = per
            del v

            # broadcast one matrix to every device
            host = _crand(rng, m)
            v = create_segmented(env, m, Clone())
            row = run("broadcast", lambda: comm.broadcast(host, v).wait(), m * item, h2d_per_device)
            if row["host_to_device_bytes"] != g * m * item:
                violations.append(f"broadcast G={g}: {row['host_to_device_bytes']} B != G*payload")

            # reduce one matrix per device into host memory
            out = np.empty(m, np.complex64)
            row = run(
                "reduce",
                lambda: comm.reduce(v, out).wait(),
                m * item,
                lambda led: [led.query(endpoint=r).bytes for r in env.ranks],
            )
            groups = topo.peer_sets(env.ranks)
            if row["host_staged_bytes"]:
                violations.append(f"reduce G={g}: host-staged bytes recorded")
            if ledger.query(PathKind.DEVICE_TO_HOST).count != len(groups):
                violations.append(f"reduce G={g}: expected {len(groups)} device-to-host partials")
            for (s, d, k), _ in ledger.entries().items():
                if k is PathKind.PEER_TO_PEER and topo.ioh(s) != topo.ioh(d):
                    violations.append(f"reduce G={g}: peer-to-peer record crosses IOHs ({s}->{d})")
            if not np.allclose(out, g * host, rtol=1e-5, atol=1e-5):
                violations.append(f"reduce G={g}: result differs from G * x")
    return rows, timings, violations


def bench_algos(max_devices: int, sizes=(64, 128, 256, 512), matrices: int = 12, seed: int = 0,
                backend: Optional[str] = None):
    """Batched FFT (forward + inverse), a*X+Y and A.B over sizes x G = 1..min(4, max_devices)."""
    rng = np.random.default_rng(seed)
    rows, timings, violations = [], [], []
    for size in sizes:
        m = size * size
        x_host = _crand(rng, matrices * m)
        y_host = _crand(rng, matrices * m)
        a_host = _crand(rng, m)
        b_host = _crand(rng, m)
        for g in range(1, min(4, max_devices) + 1):
            with create_environment(g) as env:
                ledger = env.ledger
                X = create_segmented(env, matrices * m, Blockwise(m))
                Y = create_segmented(env, matrices * m, Blockwise(m))
                (comm.scatter(x_host, X) | comm.scatter(y_host, Y)).wait()
                per_dev = [s.len for s in X.segments] + [0] * (g - len(X.segments))

                plan = nm.BatchedFftPlan(size, size, matrices, backend=backend)
                ledger.reset()
                t0 = time.perf_counter()
                nm.fft_forward(plan, X, X).wait()
                nm.fft_inverse(plan, X, X).wait()
                timings.append({"benchmark": "algos", "scenario": "fft", "size": size, "devices": g,
                                "seconds": time.perf_counter() - t0})
                rows.append(_algo_row("fft", size, g, matrices, per_dev, ledger))

                ledger.reset()
                t0 = time.perf_counter()
                nm.axpy(0.5 - 0.25j, X, Y).wait()
                timings.append({"benchmark": "algos", "scenario": "axpy", "size": size, "devices": g,
                                "seconds": time.perf_counter() - t0})
                rows.append(_algo_row("axpy", size, g, matrices, per_dev, ledger))

                # A.B: rows of A split across devices, B replicated
                A = create_segmented(env, m, Blockwise(size))
                C = create_segmented(env, m, Blockwise(size))
                B = create_segmented(env, m, Clone())
                comm.scatter(a_host, A).wait()
                ledger.reset()
                t0 = time.perf_counter()
                comm.broadcast(b_host, B).wait()
                nm.gemm(A, B, C, size, size, size).wait()
                timings.append({"benchmark": "algos", "scenario": "gemm", "size": size, "devices": g,
                                "seconds": time.perf_counter() - t0})
                gemm_dev = [s.len for s in C.segments] + [0] * (g - len(C.segments))
                rows.append(_algo_row("gemm", size, g, 1, gemm_dev, ledger))

                for r in rows[-3:]:
                    if r["cross_device_bytes"]:
                        violations.append(f"{r['algorithm']} size={size} G={g}: cross-device bytes recorded")
                if rows[-1]["host_to_device_bytes"] != g * m * 8:
                    violations.append(f"gemm size={size} G={g}: transfers beyond the B broadcast")
                if rows[-3]["host_to_device_bytes"] or rows[-2]["host_to_device_bytes"]:
                    violations.append(f"fft/axpy size={size} G={g}: host transfers recorded")
    return rows, timings, violations


def _algo_row(name, size, g, matrices, per_dev, ledger) -> Dict:
    return {
        "algorithm": name,
        "matrix_size": size,
        "devices": g,
        "matrices": matrices,
        "per_device_max_elements": max(per_dev),
        "per_device_min_elements": min(per_dev),
        "cross_device_bytes": ledger.cross_device_bytes(),
        "host_to_device_bytes": ledger.query(PathKind.HOST_TO_DEVICE).bytes,
    }


def _crand(rng, n):
    return (rng.standard_normal(n) + 1j * rng.standard_normal(n)).astype(np.complex64)
