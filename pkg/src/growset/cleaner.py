"""Noise detection and one-shot relabeling of stream records.

A record's condition (its paired embedding, or its class label) is scored
against its data; scores under the threshold ``delta`` trigger a single
relabel attempt through a hook, after which the record either passes or is
rejected.
"""

from __future__ import annotations

import json
import math
import queue
import selectors
import subprocess
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .core import DataRecord, normalize
from .errors import ConfigError, DataError, DimMismatch, EmptyCleanSet, HookFailure, MissingPair

HOOK_TIMEOUT_S = 30.0


@dataclass(frozen=True)
class CleanerConfig:
    delta_mode: str = "fixed"
    delta: float = 0.3
    z: float = 1.0
    warmup: int = 100

    def __post_init__(self):
        if self.delta_mode not in ("fixed", "online_stats"):
            raise ConfigError(f"unknown delta_mode {self.delta_mode!r}")
        if not -1.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [-1, 1]")
        if self.z < 0:
            raise ConfigError("z must be >= 0")
        if self.warmup < 2:
            raise ConfigError("warmup must be >= 2")


@dataclass
class OnlineStats:
    """Welford running mean/variance of observed pair scores."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(max(self.variance, 0.0))

    def threshold(self, z: float, warmup: int, fallback: float) -> float:
        if self.count < warmup:
            return fallback
        return self.mean - z * self.std


@dataclass(frozen=True)
class Relabel:
    """Replacement condition returned by a hook."""

    paired: Optional[np.ndarray] = None
    label: Optional[int] = None


RelabelHook = Callable[[DataRecord], Optional[Relabel]]


@dataclass(frozen=True)
class Pass:
    record: DataRecord
    relabeled: bool
    score: float


@dataclass(frozen=True)
class Reject:
    reason: str
    score: float
    detail: str = ""


CleanResult = Union[Pass, Reject]


def score_pair(record: DataRecord) -> float:
    """Cosine similarity of the two modalities (both unit vectors)."""
    if record.paired is None:
        raise MissingPair(f"record {record.id!r} has no paired embedding")
    if record.paired.shape != record.primary.shape:
        raise DimMismatch("paired embedding dim differs from primary")
    return float(np.dot(record.primary.astype(np.float64), record.paired.astype(np.float64)))


def classify_score(label: int, neighbor_labels: Sequence[int]) -> float:
    """Fraction of the nearest admitted neighbors that vote for ``label``."""
    if len(neighbor_labels) == 0:
        raise EmptyCleanSet("no admitted neighbors to vote")
    return sum(1 for lab in neighbor_labels if lab == label) / len(neighbor_labels)


def majority_label(neighbor_labels: Sequence[int]) -> Optional[int]:
    """Most common label; ties go to the label of the nearer neighbor."""
    if not neighbor_labels:
        return None
    counts: dict = {}
    for lab in neighbor_labels:
        counts[lab] = counts.get(lab, 0) + 1
    best = max(counts.values())
    return next(lab for lab in neighbor_labels if counts[lab] == best)


class Cleaner:
    def __init__(self, config: CleanerConfig, stats: Optional[OnlineStats] = None):
        self.config = config
        self.stats = stats if stats is not None else OnlineStats()

    @property
    def threshold(self) -> float:
        if self.config.delta_mode == "fixed":
            return self.config.delta
        return self.stats.threshold(self.config.z, self.config.warmup, self.config.delta)

    def clean(self, record: DataRecord, scorer: Callable[[DataRecord], float],
              hook: Optional[RelabelHook] = None) -> CleanResult:
        """Score ``record``; relabel once through ``hook`` if it falls under threshold.

        The threshold is read before the current score is folded into the
        online statistics, and only pre-relabel scores are recorded.
        """
        threshold = self.threshold
        score = scorer(record)
        if self.config.delta_mode == "online_stats":
            self.stats.update(score)
        if score >= threshold:
            return Pass(record, False, score)
        if hook is None:
            return Reject("noise", score)
        try:
            fixed = apply_relabel(record, hook(record))
        except HookFailure as exc:
            return Reject("hook_failure", score, str(exc))
        except Exception as exc:  # hook code is third-party; never abort the stream
            return Reject("hook_failure", score, f"{type(exc).__name__}: {exc}")
        if fixed is None:
            return Reject("noise", score, "hook returned no replacement")
        rescored = scorer(fixed)
        if rescored >= threshold:
            return Pass(fixed, True, rescored)
        return Reject("noise", rescored, "still below threshold after relabel")


def apply_relabel(record: DataRecord, result: Optional[Relabel]) -> Optional[DataRecord]:
    if result is None or (result.paired is None and result.label is None):
        return None
    out = record
    if result.paired is not None:
        try:
            paired = normalize(result.paired)
        except DataError as exc:
            raise HookFailure(f"bad paired embedding from hook: {exc}") from None
        if paired.shape != record.primary.shape:
            raise HookFailure(f"hook returned dim {paired.shape[0]}, expected {record.dim}")
        out = out.with_paired(paired)
    if result.label is not None:
        if int(result.label) < 0:
            raise HookFailure("hook returned a negative label")
        out = out.with_label(int(result.label))
    return out


def hook_request(record: DataRecord) -> str:
    req = {"id": record.id, "payload_ref": record.payload_ref}
    if record.label is not None:
        req["label"] = record.label
    return json.dumps(req, separators=(",", ":"))


def parse_hook_response(line: str) -> Optional[Relabel]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise HookFailure(f"hook response is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise HookFailure("hook response must be a JSON object")
    if "paired_embedding" in obj:
        vec = obj["paired_embedding"]
        if not isinstance(vec, list) or not all(isinstance(x, (int, float)) for x in vec):
            raise HookFailure("paired_embedding must be a list of numbers")
        return Relabel(paired=np.asarray(vec, dtype=np.float64))
    if "label" in obj:
        if not isinstance(obj["label"], int) or isinstance(obj["label"], bool):
            raise HookFailure("label must be an integer")
        return Relabel(label=obj["label"])
    return None


class _HookProcess:
    def __init__(self, argv: Sequence[str], timeout: float):
        self.argv = argv
        self.timeout = timeout
        self.proc: Optional[subprocess.Popen] = None

    def call(self, record: DataRecord) -> Optional[Relabel]:
        if self.proc is None or self.proc.poll() is not None:
            try:
                self.proc = subprocess.Popen(self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                             text=True, encoding="utf-8", bufsize=1)
            except OSError as exc:
                raise HookFailure(f"cannot start hook {self.argv[0]!r}: {exc}") from None
        proc = self.proc
        try:
            proc.stdin.write(hook_request(record) + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise HookFailure(f"hook process not accepting input: {exc}") from None
        with selectors.DefaultSelector() as sel:
            sel.register(proc.stdout, selectors.EVENT_READ)
            if not sel.select(self.timeout):
                self.close()
                raise HookFailure(f"hook timed out after {self.timeout:g}s")
        line = proc.stdout.readline()
        if not line:
            self.close()
            raise HookFailure("hook process exited without a response")
        return parse_hook_response(line)

    def close(self) -> None:
        if self.proc is not None:
            if self.proc.poll() is None:
                self.proc.kill()
            self.proc.wait()
            for stream in (self.proc.stdin, self.proc.stdout):
                try:
                    stream.close()
                except OSError:
                    pass
            self.proc = None


class CommandHook:
    """External relabel process speaking one JSON line in, one JSON line out.

    Processes are started lazily and kept alive across records. Each
    concurrent caller gets its own process (up to ``workers``), so requests
    and responses never interleave on one pipe. A timeout or crash raises
    :class:`HookFailure` and that process is restarted on its next call.
    """

    def __init__(self, argv: Sequence[str], timeout: float = HOOK_TIMEOUT_S, workers: int = 1):
        self.argv = list(argv)
        self.timeout = timeout
        self._idle: "queue.LifoQueue[_HookProcess]" = queue.LifoQueue()
        self._all: List[_HookProcess] = []
        self._slots = threading.BoundedSemaphore(max(1, workers))
        self._lock = threading.Lock()

    def __call__(self, record: DataRecord) -> Optional[Relabel]:
        with self._slots:
            try:
                worker = self._idle.get_nowait()
            except queue.Empty:
                worker = _HookProcess(self.argv, self.timeout)
                with self._lock:
                    self._all.append(worker)
            try:
                return worker.call(record)
            finally:
                self._idle.put(worker)

    def close(self) -> None:
        with self._lock:
            for worker in self._all:
                worker.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
