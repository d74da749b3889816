"""Oracle checks: gain monotonicity on nested sets and HNSW recall."""

from __future__ import annotations

from typing import Dict, Sequence

from .ann import ExactIndex, HNSWIndex
from .bench import unit_sphere
from .core import ARITHMETIC, HARMONIC, seeded_rng
from .gain import info_gain


def monotonicity_check(points: int = 200, k: int = 4, probes: int = 200, dim: int = 16,
                       subset: int = None, seed: int = 0,
                       modes: Sequence[str] = (ARITHMETIC, HARMONIC)) -> Dict:
    """Count probes whose exact-k-NN gain over a superset exceeds that over a subset."""
    if points < 2 * k:
        raise ValueError("points must be >= 2k")
    subset = subset if subset is not None else max(k, points // 4)
    rng = seeded_rng(seed, "oracle/monotonicity")
    big = ExactIndex(dim)
    small = ExactIndex(dim)
    perm = rng.permutation(points)
    for j, v in zip(perm, unit_sphere(rng, points, dim)):
        big.insert(v, int(j))
        if j < subset:
            small.insert(v, int(j))
    violations = {m: 0 for m in modes}
    for x in unit_sphere(rng, probes, dim):
        du = [d for _, d in small.query(x, k)]
        dv = [d for _, d in big.query(x, k)]
        for m in modes:
            if info_gain(dv, m) > info_gain(du, m):
                violations[m] += 1
    return {"points": points, "subset": subset, "k": k, "probes": probes, "dim": dim,
            "violations": violations, "passed": all(v == 0 for v in violations.values())}


def recall_check(points: int = 10000, dim: int = 32, k: int = 10, probes: int = 200,
                 seed: int = 0, M: int = 16, ef_construction: int = 200, ef_search: int = 128,
                 threshold: float = 0.95) -> Dict:
    rng = seeded_rng(seed, "oracle/recall")
    hnsw = HNSWIndex(dim, M, ef_construction, ef_search, seed=seed)
    exact = ExactIndex(dim)
    for i, v in enumerate(unit_sphere(rng, points, dim)):
        hnsw.insert(v, i)
        exact.insert(v, i)
    hits = 0
    for q in unit_sphere(rng, probes, dim):
        truth = {o for o, _ in exact.query(q, k)}
        hits += len(truth & {o for o, _ in hnsw.query(q, k)})
    recall = hits / (probes * min(k, points))
    return {"points": points, "dim": dim, "k": k, "probes": probes, "recall": recall,
            "threshold": threshold, "passed": recall >= threshold}
