"""Per-record dataset growth: clean, query neighbors, score gain, admit.

For every incoming record the pipeline runs, in this order:

1. the cleaner (pair similarity, or a k-NN label vote in classification mode),
   with at most one relabel attempt;
2. a k-NN query per modality against the already admitted records;
3. gain composition, frozen at float32 precision;
4. append to the manifest, then insert the embedding(s) into the index(es).

A record therefore never sees itself as a neighbor, and gains written to the
manifest are never revisited.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np

from .ann import HNSWIndex
from .cleaner import (
    Cleaner,
    CleanerConfig,
    OnlineStats,
    Pass,
    Relabel,
    RelabelHook,
    classify_score,
    majority_label,
    score_pair,
)
from .core import (
    CLASSIFICATION,
    INFO_ALIGNMENT,
    MULTIMODAL,
    DataRecord,
    GainAnnotatedRecord,
    PipelineConfig,
)
from .errors import CorruptCheckpoint, DataError, DimMismatch, EmptyCleanSet, GrowsetError, MissingPair
from .formats import iter_manifest, manifest_line
from .gain import GainConfig, GainParts, alignment_gain, compose_gain

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GSCK"
CHECKPOINT_VERSION = 1
HIST_BINS = 20


@dataclass(frozen=True)
class Admitted:
    gain: float
    relabeled: bool
    ordinal: int


@dataclass(frozen=True)
class Rejected:
    reason: str
    detail: str = ""
    score: Optional[float] = None


StepResult = Union[Admitted, Rejected]


@dataclass
class Counters:
    seen: int = 0
    rejected: int = 0
    relabeled: int = 0
    admitted: int = 0
    uncleaned: int = 0


class GrowthState:
    """Manifest, indexes and cleaner statistics of one growth run."""

    def __init__(self, config: PipelineConfig, hook: Optional[RelabelHook] = None):
        self.config = config
        self.hook = hook
        self.dim: Optional[int] = config.dim
        self.manifest: List[GainAnnotatedRecord] = []
        self.primary_index: Optional[HNSWIndex] = None
        self.paired_index: Optional[HNSWIndex] = None
        self.labels: List[Optional[int]] = []
        self.ids: set = set()
        self.counters = Counters()
        self.reject_reasons: Dict[str, int] = {}
        self.cleaner = Cleaner(CleanerConfig(config.delta_mode, config.delta, config.z, config.warmup))
        self.gain_config = GainConfig(config.k, config.mean_mode, config.gain_composition)
        if self.dim is not None:
            self._make_indexes(self.dim)

    def _make_indexes(self, dim: int) -> None:
        c = self.config
        self.dim = dim
        self.primary_index = HNSWIndex(dim, c.M, c.ef_construction, c.ef_search, seed=c.seed,
                                       stream_label="hnsw-levels/primary")
        if c.mode == MULTIMODAL:
            self.paired_index = HNSWIndex(dim, c.M, c.ef_construction, c.ef_search, seed=c.seed,
                                          stream_label="hnsw-levels/paired")

    @property
    def threshold(self) -> float:
        return self.cleaner.threshold

    def check_invariants(self) -> None:
        c = self.counters
        n = len(self.manifest)
        assert c.admitted == n
        assert c.seen == c.admitted + c.rejected
        assert (len(self.primary_index) if self.primary_index else 0) == n
        if self.config.mode == MULTIMODAL:
            assert (len(self.paired_index) if self.paired_index else 0) == n

    # one step

    def _check_dims(self, record: DataRecord) -> None:
        if self.dim is None:
            self._make_indexes(record.dim)
        if record.dim != self.dim:
            raise DimMismatch(f"record {record.id!r} has dim {record.dim}, run uses {self.dim}")
        if record.paired is not None and record.paired.shape[0] != self.dim:
            raise DimMismatch(f"record {record.id!r} paired dim {record.paired.shape[0]} != {self.dim}")

    def _reject(self, reason: str, detail: str = "", score: Optional[float] = None) -> Rejected:
        self.counters.rejected += 1
        self.reject_reasons[reason] = self.reject_reasons.get(reason, 0) + 1
        return Rejected(reason, detail, score)

    def _neighbor_labels(self, neighbors) -> List[int]:
        return [self.labels[o] for o, _ in neighbors]

    def step(self, record: DataRecord, hook: Optional[RelabelHook] = None) -> StepResult:
        """Process one record. Raises DimMismatch if its dims do not match the run."""
        self._check_dims(record)
        self.counters.seen += 1
        hook = hook or self.hook
        try:
            return self._step(record, hook)
        except GrowsetError as exc:
            return self._reject(type(exc).__name__, str(exc))

    def _step(self, record: DataRecord, hook: Optional[RelabelHook]) -> StepResult:
        mode = self.config.mode
        k = self.config.k
        if record.id in self.ids:
            return self._reject("duplicate_id", f"id {record.id!r} already admitted")
        neighbors = None
        relabeled = False
        if mode == MULTIMODAL:
            if record.paired is None:
                raise MissingPair(f"record {record.id!r} has no paired embedding")
            outcome = self.cleaner.clean(record, score_pair, hook)
        elif mode == CLASSIFICATION:
            if record.label is None:
                raise DataError(f"record {record.id!r} has no label")
            neighbors = self.primary_index.query(record.primary, k)
            votes = self._neighbor_labels(neighbors)
            try:
                # neighbor votes only mean something once the clean set has warmed up;
                # before that a single early mislabel would propagate through relabeling
                if len(self.manifest) < self.config.warmup:
                    raise EmptyCleanSet(f"clean set has {len(self.manifest)} < {self.config.warmup} records")
                classify_score(record.label, votes)
            except EmptyCleanSet:
                outcome = Pass(record, False, float("nan"))
                self.counters.uncleaned += 1
            else:
                if hook is None and self.config.majority_relabel:
                    def hook(_rec, _votes=votes):
                        return Relabel(label=majority_label(_votes))
                outcome = self.cleaner.clean(record, lambda r: classify_score(r.label, votes), hook)
        else:
            outcome = Pass(record, False, float("nan"))
        if not isinstance(outcome, Pass):
            return self._reject(outcome.reason, outcome.detail, outcome.score)
        rec = outcome.record
        relabeled = outcome.relabeled

        if neighbors is None:
            neighbors = self.primary_index.query(rec.primary, k)
        gain = self._gain(rec, neighbors)
        # freeze at float32 so the 9-digit manifest encoding round-trips exactly
        gain = float(np.float32(gain))

        ordinal = len(self.manifest)
        self.manifest.append(GainAnnotatedRecord(rec, gain, ordinal, relabeled))
        self.labels.append(rec.label)
        self.ids.add(rec.id)
        self.primary_index.insert(rec.primary, ordinal)
        if self.paired_index is not None:
            self.paired_index.insert(rec.paired, ordinal)
        self.counters.admitted += 1
        self.counters.relabeled += int(relabeled)
        return Admitted(gain, relabeled, ordinal)

    def _gain(self, rec: DataRecord, neighbors) -> float:
        if not neighbors:
            return 1.0
        parts = GainParts(primary_distances=[d for _, d in neighbors])
        comp = self.gain_config.composition
        if self.paired_index is not None:
            parts.paired_distances = [d for _, d in self.paired_index.query(rec.paired, self.config.k)]
        if self.config.mode == CLASSIFICATION:
            parts.query_label = rec.label
            parts.neighbor_labels = self._neighbor_labels(neighbors)
        if comp == INFO_ALIGNMENT:
            parts.alignment = alignment_gain(rec.primary, rec.paired)
        return compose_gain(parts, self.gain_config)

    # driving a stream

    def grow(self, records: Iterable[DataRecord],
             progress: Optional[Callable[["GrowthState"], None]] = None,
             on_reject: Optional[Callable[[DataRecord, Rejected], None]] = None,
             threads: int = 1) -> "GrowthState":
        """Fold :meth:`step` over ``records``.

        With ``threads > 1``, fixed threshold and a hook, relabel calls for
        upcoming low-scoring pairs are issued concurrently; results are still
        consumed in input order, so the outcome equals a serial run.
        """
        every = self.config.progress_every
        stream = iter(records)
        if threads > 1 and self.hook is not None and self.config.mode == MULTIMODAL \
                and self.config.delta_mode == "fixed":
            stream = self._prefetch_hooks(stream, threads)
        for record in stream:
            hook = None
            if isinstance(record, _Prefetched):
                record, hook = record.record, record.hook
            result = self.step(record, hook)
            if isinstance(result, Rejected) and on_reject is not None:
                on_reject(record, result)
            if progress is not None and self.counters.seen % every == 0:
                progress(self)
        return self

    def _prefetch_hooks(self, stream: Iterator[DataRecord], threads: int) -> Iterator["_Prefetched"]:
        window = 4 * threads
        delta = self.config.delta
        with ThreadPoolExecutor(max_workers=threads) as pool:
            while True:
                batch = list(islice(stream, window))
                if not batch:
                    return
                futures = []
                for rec in batch:
                    needs = rec.paired is not None and score_pair(rec) < delta
                    futures.append(pool.submit(_call_hook, self.hook, rec) if needs else None)
                for rec, fut in zip(batch, futures):
                    yield _Prefetched(rec, (lambda _r, _f=fut: _unwrap(_f.result())) if fut else None)

    # reporting

    def stats(self) -> dict:
        gains = np.array([r.gain for r in self.manifest], dtype=np.float64)
        hist, _ = np.histogram(gains, bins=HIST_BINS, range=(0.0, 1.0))
        c = self.counters
        return {
            "seen": c.seen,
            "admitted": c.admitted,
            "rejected": c.rejected,
            "relabeled": c.relabeled,
            "uncleaned": c.uncleaned,
            "reject_reasons": dict(sorted(self.reject_reasons.items())),
            "threshold": self.threshold,
            "gain_histogram": hist.tolist(),
            "mean_gain": float(gains.mean()) if gains.size else None,
            "index_sizes": {
                "primary": len(self.primary_index) if self.primary_index else 0,
                "paired": len(self.paired_index) if self.paired_index else 0,
            },
        }

    # persistence

    def checkpoint(self) -> bytes:
        sections = [(b"CONF", json.dumps(self.config.to_dict(), sort_keys=True).encode())]
        mani = io.StringIO()
        for r in self.manifest:
            mani.write(manifest_line(r))
        sections.append((b"MANI", mani.getvalue().encode("utf-8")))
        c = self.counters
        st = self.cleaner.stats
        stat = {
            "dim": self.dim,
            "counters": [c.seen, c.rejected, c.relabeled, c.admitted, c.uncleaned],
            "reject_reasons": self.reject_reasons,
            "online_stats": [st.count, st.mean, st.m2],
        }
        sections.append((b"STAT", json.dumps(stat, sort_keys=True).encode()))
        if self.primary_index is not None:
            sections.append((b"PIDX", self.primary_index.snapshot()))
        if self.paired_index is not None:
            sections.append((b"QIDX", self.paired_index.snapshot()))
        out = io.BytesIO()
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<HI", CHECKPOINT_VERSION, len(sections)))
        for tag, payload in sections:
            out.write(tag)
            out.write(struct.pack("<Q", len(payload)))
            out.write(payload)
        body = out.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def resume(cls, data: bytes, hook: Optional[RelabelHook] = None) -> "GrowthState":
        sections = _read_sections(data)
        try:
            config = PipelineConfig.from_mapping(json.loads(sections[b"CONF"]))
            stat = json.loads(sections[b"STAT"])
            state = cls(config, hook)
            state.dim = stat["dim"]
            c = stat["counters"]
            state.counters = Counters(*c)
            state.reject_reasons = dict(stat["reject_reasons"])
            state.cleaner.stats = OnlineStats(*stat["online_stats"])
            if b"PIDX" in sections:
                state.primary_index = HNSWIndex.restore(sections[b"PIDX"])
            if b"QIDX" in sections:
                state.paired_index = HNSWIndex.restore(sections[b"QIDX"])
            entries = list(iter_manifest(sections[b"MANI"].decode("utf-8").splitlines()))
        except GrowsetError as exc:
            raise CorruptCheckpoint(f"bad checkpoint section: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from None
        for e in entries:
            paired = state.paired_index.vector(e.ordinal) if state.paired_index is not None else None
            rec = DataRecord(e.id, state.primary_index.vector(e.ordinal), paired, e.label, e.payload_ref)
            state.manifest.append(GainAnnotatedRecord(rec, e.gain, e.ordinal, e.relabeled))
            state.labels.append(e.label)
            state.ids.add(e.id)
        try:
            state.check_invariants()
        except AssertionError:
            raise CorruptCheckpoint("checkpoint sections disagree on record counts") from None
        return state


@dataclass
class _Prefetched:
    record: DataRecord
    hook: Optional[RelabelHook]


def _call_hook(hook: RelabelHook, rec: DataRecord):
    try:
        return hook(rec)
    except Exception as exc:  # re-raised in order by the consuming step
        return _HookError(exc)


class _HookError:
    def __init__(self, exc: Exception):
        self.exc = exc


def _unwrap(result):
    if isinstance(result, _HookError):
        raise result.exc
    return result


def _read_sections(data: bytes) -> Dict[bytes, bytes]:
    if len(data) < 14 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("not a growset checkpoint")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    pos = 10
    sections = {}
    for _ in range(count):
        if pos + 12 > len(body):
            raise CorruptCheckpoint("section header overruns checkpoint")
        tag = body[pos: pos + 4]
        (length,) = struct.unpack_from("<Q", body, pos + 4)
        pos += 12
        if pos + length > len(body):
            raise CorruptCheckpoint(f"section {tag!r} overruns checkpoint")
        sections[tag] = body[pos: pos + length]
        pos += length
    for required in (b"CONF", b"MANI", b"STAT"):
        if required not in sections:
            raise CorruptCheckpoint(f"missing section {required!r}")
    return sections


def new_state(config: PipelineConfig, hook: Optional[RelabelHook] = None) -> GrowthState:
    return GrowthState(config, hook)


def grow(state: GrowthState, records: Iterable[DataRecord], **kwargs) -> GrowthState:
    return state.grow(records, **kwargs)


def checkpoint(state: GrowthState) -> bytes:
    return state.checkpoint()


def resume(data: bytes, hook: Optional[RelabelHook] = None) -> GrowthState:
    return GrowthState.resume(data, hook)


__all__ = [
    "Admitted",
    "Rejected",
    "GrowthState",
    "new_state",
    "grow",
    "checkpoint",
    "resume",
]
