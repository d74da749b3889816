"""Per-step latency of the neighbor index as the collected set grows."""

from __future__ import annotations

import statistics
import time
from typing import Dict, List, Sequence

import numpy as np

from .ann import HNSWIndex
from .core import seeded_rng


def unit_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(np.float32)


def _warm_up(dim: int, M: int, ef_construction: int, ef_search: int) -> None:
    # triggers JIT compilation outside the timed region
    rng = seeded_rng(0, "bench/warmup")
    idx = HNSWIndex(dim, M, ef_construction, ef_search)
    for i, v in enumerate(unit_sphere(rng, 64, dim)):
        idx.query(v, 4)
        idx.insert(v, i)


def measure_growth(sizes: Sequence[int], dim: int = 32, seed: int = 0, k: int = 4,
                   steps: int = 200, rounds: int = 5, M: int = 16, ef_construction: int = 200,
                   ef_search: int = 128) -> Dict:
    """Time one step (query k neighbors, then insert) at each index size.

    A single index is grown through ``sizes`` in increasing order. At each
    size ``rounds`` batches of ``steps`` fresh points are stepped and the
    median batch mean is reported, which damps scheduler noise.
    """
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes or sizes[0] < 1:
        raise ValueError("sizes must be positive integers")
    _warm_up(dim, M, ef_construction, ef_search)
    rng = seeded_rng(seed, "bench/points")
    idx = HNSWIndex(dim, M, ef_construction, ef_search, seed=seed)
    results: List[Dict] = []
    ordinal = 0
    for size in sizes:
        need = size - len(idx)
        if need > 0:
            for v in unit_sphere(rng, need, dim):
                idx.insert(v, ordinal)
                ordinal += 1
        batch_ms = []
        for _ in range(rounds):
            probes = unit_sphere(rng, steps, dim)
            t0 = time.perf_counter()
            for v in probes:
                idx.query(v, k)
                idx.insert(v, ordinal)
                ordinal += 1
            batch_ms.append((time.perf_counter() - t0) * 1e3 / steps)
        results.append({"n": size, "step_ms": statistics.median(batch_ms), "batches_ms": batch_ms})
    report = {"dim": dim, "k": k, "M": M, "ef_construction": ef_construction,
              "ef_search": ef_search, "results": results}
    if len(results) > 1:
        report["ratio"] = results[-1]["step_ms"] / results[0]["step_ms"]
        report["size_ratio"] = results[-1]["n"] / results[0]["n"]
    return report
