"""Neighborhood-based information gain.

A record's gain is the mean cosine distance to its k nearest admitted
neighbors. Adding points to the reference set can only pull the k-th
neighbor closer, so the gain of a fixed probe never increases as the set
grows (diminishing returns).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    ARITHMETIC,
    COMPOSITIONS,
    HARMONIC,
    IMAGE_TEXT_AVERAGE,
    INFO_ALIGNMENT,
    INFO_ENTROPY_AVERAGE,
    INFO_ONLY,
)
from .errors import ConfigError, DimMismatch, EmptyNeighborhood, MissingPart

# distances below this are exact duplicates (float64 cosine of identical
# float32 vectors is ~1e-16 from 1)
DUPLICATE_EPS = 1e-9


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


@dataclass(frozen=True)
class GainConfig:
    k: int = 4
    mean_mode: str = ARITHMETIC
    composition: str = INFO_ONLY

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.mean_mode not in (ARITHMETIC, HARMONIC):
            raise ConfigError(f"unknown mean_mode {self.mean_mode!r}")
        if self.composition not in COMPOSITIONS:
            raise ConfigError(f"unknown composition {self.composition!r}")


def info_gain(distances: Sequence[float], mean_mode: str = ARITHMETIC) -> float:
    """Mean cosine distance to the neighbors, clamped to [0, 1].

    A neighbor at distance < ``DUPLICATE_EPS`` marks the query as an exact
    duplicate and forces the gain to 0 in both modes.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise EmptyNeighborhood("info_gain needs at least one neighbor")
    if d.min() < DUPLICATE_EPS:
        return 0.0
    if mean_mode == ARITHMETIC:
        return _clamp01(float(d.mean()))
    if mean_mode == HARMONIC:
        return _clamp01(float(d.size / np.sum(1.0 / d)))
    raise ConfigError(f"unknown mean_mode {mean_mode!r}")


def entropy_gain(query_label: int, neighbor_labels: Sequence[int]) -> float:
    """``1 - p`` where p is the fraction of neighbors sharing the query's label."""
    if len(neighbor_labels) == 0:
        raise EmptyNeighborhood("entropy_gain needs at least one neighbor")
    matches = sum(1 for lab in neighbor_labels if lab == query_label)
    return 1.0 - matches / len(neighbor_labels)


def alignment_gain(primary: np.ndarray, paired: np.ndarray) -> float:
    if primary.shape != paired.shape:
        raise DimMismatch(f"dims differ: {primary.shape[0]} vs {paired.shape[0]}")
    return _clamp01(float(np.dot(primary.astype(np.float64), paired.astype(np.float64))))


@dataclass
class GainParts:
    """Inputs to :func:`compose_gain`; only the fields a composition needs are required."""

    primary_distances: Optional[Sequence[float]] = None
    paired_distances: Optional[Sequence[float]] = None
    query_label: Optional[int] = None
    neighbor_labels: Optional[Sequence[int]] = None
    alignment: Optional[float] = None


def _need(value, name: str, composition: str):
    if value is None:
        raise MissingPart(f"{composition} requires {name}")
    return value


def compose_gain(parts: GainParts, config: GainConfig) -> float:
    comp = config.composition
    info = info_gain(_need(parts.primary_distances, "primary_distances", comp), config.mean_mode)
    if comp == INFO_ONLY:
        g = info
    elif comp == IMAGE_TEXT_AVERAGE:
        other = info_gain(_need(parts.paired_distances, "paired_distances", comp), config.mean_mode)
        g = (info + other) / 2
    elif comp == INFO_ENTROPY_AVERAGE:
        labels = _need(parts.neighbor_labels, "neighbor_labels", comp)
        g = (info + entropy_gain(_need(parts.query_label, "query_label", comp), labels)) / 2
    elif comp == INFO_ALIGNMENT:
        g = (info + _need(parts.alignment, "alignment", comp)) / 2
    else:
        raise ConfigError(f"unknown composition {comp!r}")
    return _clamp01(g)
