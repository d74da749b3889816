"""Synthetic clustered embedding streams with planted noise and duplicates.

Cluster centers are orthonormal (pairwise cosine exactly 0), so the
inter-center similarity bound of 0.2 holds by construction. A point is
``normalize(center + spread * g / sqrt(dim))`` with ``g`` standard normal,
a von Mises-Fisher-like cap around its center. In multimodal streams the
paired embedding is the point perturbed again by ``pair_spread``.

Noise records mimic shuffled captions: their paired embedding (or label) is
taken from a record of a different cluster. The ground truth for every noise
record and duplicate goes to a sidecar JSONL file.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, fields
from typing import Dict, List, Optional

import numpy as np

from .cleaner import Relabel
from .core import CLASSIFICATION, MODES, MULTIMODAL, DataRecord, normalize, parse_config_text, seeded_rng
from .errors import BadSpec
from .formats import StreamHeader, write_stream


@dataclass(frozen=True)
class SynthSpec:
    clusters: int = 2
    dim: int = 32
    points_per_cluster: int = 500
    spread: float = 0.5
    noise_fraction: float = 0.0
    duplicate_fraction: float = 0.0
    mode: str = MULTIMODAL
    pair_spread: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 1 or self.dim < 1 or self.points_per_cluster < 0:
            raise BadSpec("clusters, dim must be >= 1 and points_per_cluster >= 0")
        if self.clusters > self.dim:
            raise BadSpec("clusters must not exceed dim (centers are orthonormal)")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise BadSpec("noise_fraction must lie in [0, 1]")
        if not 0.0 <= self.duplicate_fraction < 1.0:
            raise BadSpec("duplicate_fraction must lie in [0, 1)")
        if self.spread < 0 or self.pair_spread < 0:
            raise BadSpec("spreads must be non-negative")
        if self.mode not in MODES:
            raise BadSpec(f"unknown mode {self.mode!r}")
        if self.noise_fraction > 0 and self.clusters < 2 and self.mode != "unconditioned":
            raise BadSpec("planted noise needs at least 2 clusters")

    @property
    def n_base(self) -> int:
        return self.clusters * self.points_per_cluster

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in parse_config_text(text).items():
            if key not in types:
                raise BadSpec(f"unknown synth key {key!r}")
            try:
                kwargs[key] = {"int": int, "float": float}.get(types[key], str)(value)
            except ValueError:
                raise BadSpec(f"bad value for {key}: {value!r}") from None
        return cls(**kwargs)


@dataclass
class SynthData:
    spec: SynthSpec
    records: List[DataRecord]
    clusters: np.ndarray
    truth: List[dict]

    @property
    def noise_ids(self) -> set:
        return {t["id"] for t in self.truth if t["kind"] == "noise"}

    @property
    def duplicate_ids(self) -> set:
        return {t["id"] for t in self.truth if t["kind"] == "duplicate"}


def _perturb(rng: np.random.Generator, base: np.ndarray, scale: float) -> np.ndarray:
    dim = base.shape[-1]
    return base + scale * rng.standard_normal(base.shape) / math.sqrt(dim)


def generate(spec: SynthSpec) -> SynthData:
    rng = seeded_rng(spec.seed, "synth")
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.clusters)))
    centers = q.T
    n = spec.n_base
    cluster_of = np.repeat(np.arange(spec.clusters), spec.points_per_cluster)
    rng.shuffle(cluster_of)
    points = np.array([normalize(p) for p in _perturb(rng, centers[cluster_of], spec.spread)])
    paired = None
    if spec.mode == MULTIMODAL:
        paired = np.array([normalize(p) for p in _perturb(rng, points.astype(np.float64), spec.pair_spread)])

    n_noise = int(round(spec.noise_fraction * n))
    noisy = set(rng.choice(n, size=n_noise, replace=False).tolist()) if n_noise else set()
    records: List[DataRecord] = []
    truth: List[dict] = []
    for i in range(n):
        rid = f"r{i:06d}"
        c = int(cluster_of[i])
        pair_vec = paired[i] if paired is not None else None
        label = c if spec.mode == CLASSIFICATION else None
        if i in noisy:
            if spec.mode == MULTIMODAL:
                others = np.nonzero(cluster_of != c)[0]
                pair_vec = paired[int(rng.choice(others))]
                truth.append({"id": rid, "kind": "noise", "true_paired": paired[i].tolist()})
            elif spec.mode == CLASSIFICATION:
                wrong = [x for x in range(spec.clusters) if x != c]
                label = int(rng.choice(wrong))
                truth.append({"id": rid, "kind": "noise", "true_label": c})
        records.append(DataRecord(rid, points[i], pair_vec, label, f"synth://{rid}"))

    n_dup = int(round(spec.duplicate_fraction * n / (1.0 - spec.duplicate_fraction))) if n else 0
    if n_dup:
        # each duplicate is inserted at a random position after its original
        out = list(records)
        cl = list(cluster_of)
        for j in range(n_dup):
            src_pos = int(rng.integers(len(out)))
            src = out[src_pos]
            dup = DataRecord(f"d{j:06d}", src.primary, src.paired, src.label, src.payload_ref)
            pos = int(rng.integers(src_pos + 1, len(out) + 1))
            out.insert(pos, dup)
            cl.insert(pos, cl[src_pos])
            truth.append({"id": dup.id, "kind": "duplicate", "of": src.id})
        records = out
        cluster_of = np.array(cl)
    return SynthData(spec, records, np.asarray(cluster_of), truth)


def write_synth(spec: SynthSpec, out_path, truth_path=None) -> SynthData:
    data = generate(spec)
    paired_dim = spec.dim if spec.mode == MULTIMODAL else 0
    write_stream(out_path, StreamHeader(spec.mode, spec.dim, paired_dim, len(data.records)), data.records)
    truth_path = truth_path or truth_path_for(out_path)
    with open(truth_path, "w", encoding="utf-8", newline="\n") as fh:
        for t in data.truth:
            fh.write(json.dumps(t, separators=(",", ":")) + "\n")
    return data


def truth_path_for(stream_path) -> str:
    return os.fspath(stream_path) + ".truth.jsonl"


def load_truth(path) -> Dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["id"]] = obj
    return out


class TruthHook:
    """Relabel hook that restores the planted ground truth."""

    def __init__(self, truth):
        if isinstance(truth, (str, os.PathLike)):
            truth = load_truth(truth)
        elif isinstance(truth, list):
            truth = {t["id"]: t for t in truth}
        self.truth = truth
        self.calls = 0

    def response(self, rec_id: str) -> dict:
        t = self.truth.get(rec_id)
        if t is None or t.get("kind") != "noise":
            return {}
        if "true_paired" in t:
            return {"paired_embedding": t["true_paired"]}
        return {"label": t["true_label"]}

    def __call__(self, record: DataRecord) -> Optional[Relabel]:
        self.calls += 1
        resp = self.response(record.id)
        if "paired_embedding" in resp:
            return Relabel(paired=np.asarray(resp["paired_embedding"]))
        if "label" in resp:
            return Relabel(label=resp["label"])
        return None
