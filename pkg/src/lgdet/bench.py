"""Latency benchmarks for the spatial kernels, gated on an oracle comparison."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import oracles, pointops

KERNELS = ("fps", "ballquery", "knn")


class OracleMismatch(AssertionError):
    pass


@dataclass
class BenchResult:
    kernel: str
    n: int
    trials: int
    median_ms: float
    p95_ms: float

    def line(self) -> str:
        return f"{self.kernel:10s} n={self.n:<7d} trials={self.trials:<4d} median {self.median_ms:8.3f} ms  p95 {self.p95_ms:8.3f} ms"


def _case(kernel: str, n: int, rng: np.random.Generator):
    xyz = rng.random((n, 3)) * 4.0
    m = max(1, n // 4)
    if kernel == "fps":
        return (lambda: pointops.farthest_point_sample(xyz, m)), (lambda: oracles.fps_oracle(xyz, m))
    queries = xyz[rng.choice(n, size=m, replace=False)]
    if kernel == "ballquery":
        return ((lambda: pointops.ball_query(xyz, queries, 0.4, 16).indices),
                (lambda: oracles.ball_query_oracle(xyz, queries, 0.4, 16)[0]))
    if kernel == "knn":
        k = min(16, n)
        return (lambda: pointops.knn(xyz, queries, k).indices), (lambda: oracles.knn_oracle(xyz, queries, k))
    raise KeyError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def bench(kernel: str, n: int = 2048, trials: int = 20, seed: int = 0,
          verify_n: int = 256) -> BenchResult:
    """Check the kernel against its oracle on a small instance, then time ``trials`` runs at size ``n``."""
    rng = np.random.default_rng(seed)
    fast, ref = _case(kernel, min(n, verify_n), rng)
    if not np.array_equal(np.asarray(fast()), np.asarray(ref())):
        raise OracleMismatch(f"{kernel} disagrees with its oracle")
    fast, _ = _case(kernel, n, rng)
    fast()  # warm-up (JIT compile on first call)
    times = []
    for _ in range(trials):
        t = time.perf_counter()
        fast()
        times.append((time.perf_counter() - t) * 1e3)
    return BenchResult(kernel, n, trials, float(np.median(times)), float(np.percentile(times, 95)))
