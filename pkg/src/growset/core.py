"""Domain types, configuration and the seeded random-number contract."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Optional

import numpy as np

from .errors import ConfigError, DimMismatch, NonFinite, ZeroVector

MULTIMODAL = "multimodal"
CLASSIFICATION = "classification"
UNCONDITIONED = "unconditioned"
MODES = (MULTIMODAL, CLASSIFICATION, UNCONDITIONED)

ARITHMETIC = "arithmetic"
HARMONIC = "harmonic"

INFO_ONLY = "info_only"
IMAGE_TEXT_AVERAGE = "image_text_average"
INFO_ENTROPY_AVERAGE = "info_entropy_average"
INFO_ALIGNMENT = "info_alignment"
COMPOSITIONS = (INFO_ONLY, IMAGE_TEXT_AVERAGE, INFO_ENTROPY_AVERAGE, INFO_ALIGNMENT)

DEFAULT_COMPOSITION = {
    MULTIMODAL: IMAGE_TEXT_AVERAGE,
    CLASSIFICATION: INFO_ENTROPY_AVERAGE,
    UNCONDITIONED: INFO_ONLY,
}

_ZERO_NORM = 1e-12
# float32 rounding of an already-unit vector leaves |norm - 1| below this
_UNIT_SLACK = 4e-7


def normalize(v) -> np.ndarray:
    """Return ``v`` scaled to unit Euclidean norm as a read-only float32 array.

    Vectors that are already unit length at float32 precision are returned
    unchanged (bit-for-bit), which makes the operation exactly idempotent.
    """
    arr = np.asarray(v, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ZeroVector("empty vector")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("vector has NaN/Inf components")
    norm = math.sqrt(float(np.dot(arr, arr)))
    if norm <= _ZERO_NORM:
        raise ZeroVector(f"vector norm {norm:g} too small to normalize")
    if abs(norm - 1.0) < _UNIT_SLACK:
        out = np.asarray(v, dtype=np.float32).ravel().copy()
    else:
        out = (arr / norm).astype(np.float32)
    out.flags.writeable = False
    return out


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - cos(a, b)`` in float64, clamped to [0, 2].

    The dot product is divided by the float64 norms so that a vector compared
    with itself gives 0 to within 1e-15 even though its float32 storage is
    only unit-norm to about 1e-7.
    """
    if a.shape != b.shape:
        raise DimMismatch(f"dims differ: {a.shape[0]} vs {b.shape[0]}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    denom = math.sqrt(float(np.dot(a64, a64)) * float(np.dot(b64, b64)))
    d = 1.0 - float(np.dot(a64, b64)) / denom
    return min(2.0, max(0.0, d))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - cosine_distance(a, b)


def _label_key(stream_label: str) -> int:
    return int.from_bytes(hashlib.sha256(stream_label.encode("utf-8")).digest()[:8], "little")


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Deterministic PCG64 stream keyed by ``(seed, stream_label)``."""
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, _label_key(stream_label)])
    return np.random.Generator(np.random.PCG64(ss))


def rng_state(rng: np.random.Generator) -> str:
    """Serialize the exact stream position of a PCG64 generator."""
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def rng_from_state(state: str) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = json.loads(state)
    return np.random.Generator(bg)


@dataclass(frozen=True, eq=False)
class DataRecord:
    """One element of the input stream.

    Embeddings are unit-normalized float32 arrays (see :func:`normalize`).
    """

    id: str
    primary: np.ndarray
    paired: Optional[np.ndarray] = None
    label: Optional[int] = None
    payload_ref: Optional[str] = None

    @classmethod
    def build(cls, id, primary, paired=None, label=None, payload_ref=None) -> "DataRecord":
        """Construct a record, normalizing raw embeddings."""
        return cls(
            id=str(id),
            primary=normalize(primary),
            paired=None if paired is None else normalize(paired),
            label=None if label is None else int(label),
            payload_ref=payload_ref,
        )

    @property
    def dim(self) -> int:
        return int(self.primary.shape[0])

    def with_paired(self, paired: np.ndarray) -> "DataRecord":
        return replace(self, paired=paired)

    def with_label(self, label: int) -> "DataRecord":
        return replace(self, label=int(label))


@dataclass(frozen=True, eq=False)
class GainAnnotatedRecord:
    record: DataRecord
    gain: float
    ordinal: int
    relabeled: bool = False


@dataclass
class PipelineConfig:
    """Flat run configuration; every field can be set from a key=value file."""

    mode: str = UNCONDITIONED
    k: int = 4
    mean_mode: str = ARITHMETIC
    composition: Optional[str] = None
    delta_mode: str = "fixed"
    delta: float = 0.3
    z: float = 1.0
    warmup: int = 100
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 128
    seed: int = 0
    progress_every: int = 1000
    majority_relabel: bool = True
    dim: Optional[int] = None
    paired_dim: Optional[int] = None
    hook: Optional[str] = field(default=None, metadata={"runtime": True})

    def __post_init__(self):
        self.validate()

    @property
    def gain_composition(self) -> str:
        return self.composition or DEFAULT_COMPOSITION[self.mode]

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.mean_mode not in (ARITHMETIC, HARMONIC):
            raise ConfigError(f"unknown mean_mode {self.mean_mode!r}")
        if self.M < 2:
            raise ConfigError("M must be >= 2")
        if self.ef_search < self.k:
            raise ConfigError("ef_search must be >= k")
        if self.ef_construction < 1:
            raise ConfigError("ef_construction must be >= 1")
        if self.delta_mode not in ("fixed", "online_stats"):
            raise ConfigError(f"unknown delta_mode {self.delta_mode!r}")
        if not -1.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [-1, 1]")
        if self.z < 0:
            raise ConfigError("z must be >= 0")
        if self.warmup < 2:
            raise ConfigError("warmup must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.progress_every < 1:
            raise ConfigError("progress_every must be >= 1")
        comp = self.gain_composition
        if comp not in COMPOSITIONS:
            raise ConfigError(f"unknown composition {comp!r}")
        if comp in (IMAGE_TEXT_AVERAGE, INFO_ALIGNMENT) and self.mode != MULTIMODAL:
            raise ConfigError(f"composition {comp} requires multimodal mode")
        if comp == INFO_ENTROPY_AVERAGE and self.mode != CLASSIFICATION:
            raise ConfigError(f"composition {comp} requires classification mode")
        if self.paired_dim is not None and self.dim is not None and self.paired_dim != self.dim:
            raise ConfigError("paired_dim must equal dim (no projection support)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.metadata.get("runtime")}

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PipelineConfig":
        """Build a config from string or typed values, coercing each to its field type."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, known[key].type, raw)
        return cls(**kwargs)


def _coerce(key: str, type_name: str, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    base = type_name.replace("Optional[", "").rstrip("]")
    if type_name.startswith("Optional") and text.lower() in ("", "none", "null"):
        return None
    try:
        if base == "int":
            return int(text, 0)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


__all__ = [
    "DataRecord",
    "GainAnnotatedRecord",
    "PipelineConfig",
    "normalize",
    "cosine_distance",
    "cosine_similarity",
    "seeded_rng",
    "rng_state",
    "rng_from_state",
    "parse_config_text",
]
