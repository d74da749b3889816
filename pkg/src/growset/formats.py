"""Embedding stream files (binary) and manifests (JSONL).

Stream layout, all little-endian::

    header   "GSEB" | version u16 | mode u8 | dim u32 | paired_dim u32 | count u64
    record   id_len u16 | id utf-8
             primary   dim x f32
             paired    paired_dim x f32          (multimodal only)
             label     i32                       (classification only)
             ref_len u16 | payload_ref utf-8     (ref_len 0 = absent)

``count`` 0 means unknown; the reader then stops at a clean end of file.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, List, Optional, TextIO, Union

import numpy as np

from .core import CLASSIFICATION, MULTIMODAL, UNCONDITIONED, DataRecord, GainAnnotatedRecord, normalize
from .errors import BadMagic, DataError, DimMismatch, MalformedLine, TruncatedRecord, VersionUnsupported

STREAM_MAGIC = b"GSEB"
STREAM_VERSION = 1
_HEADER = struct.Struct("<HBIIQ")
HEADER_SIZE = 4 + _HEADER.size

MODE_CODES = {UNCONDITIONED: 0, MULTIMODAL: 1, CLASSIFICATION: 2}
CODE_MODES = {v: k for k, v in MODE_CODES.items()}

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class StreamHeader:
    mode: str
    dim: int
    paired_dim: int = 0
    count: int = 0

    def pack(self) -> bytes:
        return STREAM_MAGIC + _HEADER.pack(STREAM_VERSION, MODE_CODES[self.mode], self.dim,
                                           self.paired_dim, self.count)


def _encode_str(s: Optional[str]) -> bytes:
    raw = (s or "").encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError("string field longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def encode_record(header: StreamHeader, rec: DataRecord) -> bytes:
    if rec.primary.shape[0] != header.dim:
        raise DimMismatch(f"record {rec.id!r}: dim {rec.primary.shape[0]} != {header.dim}")
    parts = [_encode_str(rec.id), np.asarray(rec.primary, dtype="<f4").tobytes()]
    if header.mode == MULTIMODAL:
        if rec.paired is None or rec.paired.shape[0] != header.paired_dim:
            raise DimMismatch(f"record {rec.id!r}: paired embedding missing or wrong dim")
        parts.append(np.asarray(rec.paired, dtype="<f4").tobytes())
    if header.mode == CLASSIFICATION:
        if rec.label is None:
            raise DataError(f"record {rec.id!r}: classification stream requires a label")
        parts.append(struct.pack("<i", rec.label))
    parts.append(_encode_str(rec.payload_ref))
    return b"".join(parts)


def write_stream(path: PathLike, header: StreamHeader, records: Iterable[DataRecord]) -> int:
    """Write ``records``; the header count is patched to the number written."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for rec in records:
            fh.write(encode_record(header, rec))
            n += 1
        fh.seek(0)
        fh.write(StreamHeader(header.mode, header.dim, header.paired_dim, n).pack())
    return n


class StreamReader:
    """Single forward pass over a stream file; iterating yields :class:`DataRecord`."""

    def __init__(self, path: PathLike):
        self.path = os.fspath(path)
        self._fh: BinaryIO = open(self.path, "rb")
        raw = self._fh.read(HEADER_SIZE)
        if raw[:4] != STREAM_MAGIC:
            self._fh.close()
            raise BadMagic(f"{self.path}: not an embedding stream (magic {raw[:4]!r})")
        if len(raw) < HEADER_SIZE:
            self._fh.close()
            raise TruncatedRecord(len(raw), f"{self.path}: truncated header")
        version, code, dim, paired_dim, count = _HEADER.unpack(raw[4:])
        if version != STREAM_VERSION:
            self._fh.close()
            raise VersionUnsupported(f"{self.path}: stream version {version}")
        if code not in CODE_MODES:
            self._fh.close()
            raise DataError(f"{self.path}: unknown mode code {code}")
        mode = CODE_MODES[code]
        if dim == 0:
            self._fh.close()
            raise DataError(f"{self.path}: dim must be positive")
        if mode == MULTIMODAL and paired_dim != dim:
            self._fh.close()
            raise DimMismatch(f"{self.path}: paired_dim {paired_dim} != dim {dim}")
        if mode != MULTIMODAL and paired_dim != 0:
            self._fh.close()
            raise DimMismatch(f"{self.path}: paired_dim set on a {mode} stream")
        self.header = StreamHeader(mode, dim, paired_dim, count)
        self._offset = HEADER_SIZE

    @property
    def mode(self) -> str:
        return self.header.mode

    @property
    def dim(self) -> int:
        return self.header.dim

    def _read(self, n: int, rec_start: int) -> bytes:
        raw = self._fh.read(n)
        if len(raw) != n:
            raise TruncatedRecord(rec_start, f"{self.path}: truncated record starting at byte offset "
                                             f"{rec_start} (needed {n} bytes at {self._offset})")
        self._offset += n
        return raw

    def _read_str(self, rec_start: int) -> str:
        (n,) = struct.unpack("<H", self._read(2, rec_start))
        try:
            return self._read(n, rec_start).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{self.path}: invalid UTF-8 in record at offset {rec_start}") from None

    def _read_vec(self, dim: int, rec_start: int) -> np.ndarray:
        arr = np.frombuffer(self._read(4 * dim, rec_start), dtype="<f4")
        try:
            return normalize(arr)
        except DataError as exc:
            raise type(exc)(f"{self.path}: record at offset {rec_start}: {exc}") from None

    def __iter__(self) -> Iterator[DataRecord]:
        h = self.header
        n = 0
        try:
            while h.count == 0 or n < h.count:
                start = self._offset
                if h.count == 0:
                    peek = self._fh.peek(1) if hasattr(self._fh, "peek") else b"x"
                    if not peek:
                        return
                rec_id = self._read_str(start)
                primary = self._read_vec(h.dim, start)
                paired = self._read_vec(h.paired_dim, start) if h.mode == MULTIMODAL else None
                label = None
                if h.mode == CLASSIFICATION:
                    (label,) = struct.unpack("<i", self._read(4, start))
                    if label < 0:
                        raise DataError(f"{self.path}: negative label at offset {start}")
                ref = self._read_str(start)
                n += 1
                yield DataRecord(rec_id, primary, paired, label, ref or None)
        finally:
            self._fh.close()

    def close(self) -> None:
        self._fh.close()


def read_stream(path: PathLike) -> StreamReader:
    return StreamReader(path)


# manifests


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    ordinal: int
    gain: float
    relabeled: bool = False
    label: Optional[int] = None
    payload_ref: Optional[str] = None


def format_gain(g: float) -> str:
    return format(g, ".9g")


def manifest_line(entry: Union[ManifestEntry, GainAnnotatedRecord]) -> str:
    if isinstance(entry, GainAnnotatedRecord):
        entry = ManifestEntry(entry.record.id, entry.ordinal, entry.gain, entry.relabeled,
                              entry.record.label, entry.record.payload_ref)
    parts = [f'"id": {json.dumps(entry.id)}', f'"ordinal": {entry.ordinal}',
             f'"gain": {format_gain(entry.gain)}', f'"relabeled": {"true" if entry.relabeled else "false"}']
    if entry.label is not None:
        parts.append(f'"label": {int(entry.label)}')
    if entry.payload_ref is not None:
        parts.append(f'"payload_ref": {json.dumps(entry.payload_ref)}')
    return "{" + ", ".join(parts) + "}\n"


def write_manifest(records: Iterable, dest: Union[PathLike, TextIO]) -> int:
    n = 0
    if hasattr(dest, "write"):
        for r in records:
            dest.write(manifest_line(r))
            n += 1
        return n
    with open(dest, "w", encoding="utf-8", newline="\n") as fh:
        return write_manifest(records, fh)


def parse_manifest_line(line: str, line_no: int, expected_ordinal: int) -> ManifestEntry:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(line_no, f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "expected a JSON object")
    for key in ("id", "ordinal", "gain", "relabeled"):
        if key not in obj:
            raise MalformedLine(line_no, f"missing {key!r}")
    if not isinstance(obj["id"], str):
        raise MalformedLine(line_no, "id must be a string")
    ordinal = obj["ordinal"]
    if not isinstance(ordinal, int) or isinstance(ordinal, bool) or ordinal != expected_ordinal:
        raise MalformedLine(line_no, f"ordinal {ordinal!r} breaks contiguity (expected {expected_ordinal})")
    gain = obj["gain"]
    if isinstance(gain, bool) or not isinstance(gain, (int, float)) or not math.isfinite(gain) \
            or not 0.0 <= gain <= 1.0:
        raise MalformedLine(line_no, f"gain {gain!r} outside [0, 1]")
    if not isinstance(obj["relabeled"], bool):
        raise MalformedLine(line_no, "relabeled must be a boolean")
    label = obj.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool) or label < 0):
        raise MalformedLine(line_no, f"bad label {label!r}")
    ref = obj.get("payload_ref")
    if ref is not None and not isinstance(ref, str):
        raise MalformedLine(line_no, "payload_ref must be a string")
    # gains are float32 values; 9 significant digits recover them exactly
    return ManifestEntry(obj["id"], ordinal, float(np.float32(gain)), obj["relabeled"], label, ref)


def iter_manifest(lines: Iterable[str]) -> Iterator[ManifestEntry]:
    expected = 0
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        yield parse_manifest_line(line, n, expected)
        expected += 1


def read_manifest(path: PathLike) -> List[ManifestEntry]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_manifest(fh))
