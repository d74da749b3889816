"""Online nearest-neighbor search over admitted embeddings.

:class:`HNSWIndex` is the approximate index used by the pipeline;
:class:`ExactIndex` scans every point and serves as its correctness oracle.
Both rank by cosine distance with ties broken by lower ordinal.
"""

from __future__ import annotations

import io
import math
import struct
import threading
import zlib
from typing import List, Optional, Tuple

import numpy as np

from . import _hnsw_kernels as K
from .core import rng_from_state, rng_state, seeded_rng
from .errors import CorruptSnapshot, DimMismatch

SNAPSHOT_MAGIC = b"GSNN"
SNAPSHOT_VERSION = 1

# one search bumps the tag by at most (levels + 1); reset well before int32 overflow
_TAG_LIMIT = 2**31 - 2**20

Neighbors = List[Tuple[int, float]]


def _as_query(v: np.ndarray, dim: int) -> Tuple[np.ndarray, float]:
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] != dim:
        raise DimMismatch(f"expected dim {dim}, got {v.shape[-1] if v.ndim else 0}")
    q = v.astype(np.float32).astype(np.float64)
    return q, _inv_norm(q)


def _inv_norm(q: np.ndarray) -> float:
    return 1.0 / math.sqrt(float(np.dot(q, q)))


def _finish(d: np.ndarray, ordinals: np.ndarray) -> Neighbors:
    order = np.lexsort((ordinals, d))
    return [(int(ordinals[j]), min(2.0, max(0.0, float(d[j])))) for j in order]


class ExactIndex:
    """Brute-force index; every query scans all points."""

    def __init__(self, dim: int):
        self.dim = dim
        self._vecs = np.empty((16, dim), dtype=np.float32)
        self._inv = np.empty(16, dtype=np.float64)
        self._ord = np.empty(16, dtype=np.int64)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def insert(self, v: np.ndarray, ordinal: int) -> int:
        q, qinv = _as_query(v, self.dim)
        if self._n == self._vecs.shape[0]:
            cap = 2 * self._n
            self._vecs = np.resize(self._vecs, (cap, self.dim))
            self._inv = np.resize(self._inv, cap)
            self._ord = np.resize(self._ord, cap)
        j = self._n
        self._vecs[j] = q
        self._inv[j] = qinv
        self._ord[j] = ordinal
        self._n += 1
        return j

    def query(self, v: np.ndarray, k: int) -> Neighbors:
        q, qinv = _as_query(v, self.dim)
        if self._n == 0:
            return []
        d = K.brute_force(self._vecs, self._inv, q, qinv, self._n)
        ords = self._ord[: self._n]
        order = np.lexsort((ords, d))[:k]
        return [(int(ords[j]), min(2.0, max(0.0, float(d[j])))) for j in order]

    exact_query = query


class HNSWIndex:
    """Hierarchical navigable small-world graph with cosine distance.

    Node ids are assigned densely in insertion order. Level-0 lists hold up to
    ``2*M`` neighbors, upper levels up to ``M``; adjacency is kept symmetric
    by unlinking both directions whenever a full list is pruned.

    Inserts are serialized by an internal lock. Queries may run concurrently
    with each other but not with an insert.
    """

    def __init__(self, dim: int, M: int = 16, ef_construction: int = 200, ef_search: int = 128,
                 seed: int = 0, stream_label: str = "hnsw-levels",
                 rng: Optional[np.random.Generator] = None):
        if M < 2:
            raise ValueError("M must be >= 2")
        self.dim = dim
        self.M = M
        self.M0 = 2 * M
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.level_mult = 1.0 / math.log(M)
        self._rng = rng if rng is not None else seeded_rng(seed, stream_label)
        self._n = 0
        self._n_upper = 0
        self.entry = -1
        self.max_level = -1
        self._alloc(64, 16)
        self._write_lock = threading.Lock()
        self._local = threading.local()

    def _alloc(self, cap: int, cap_upper: int) -> None:
        self._vecs = np.zeros((cap, self.dim), dtype=np.float32)
        self._inv = np.zeros(cap, dtype=np.float64)
        self._ord = np.zeros(cap, dtype=np.int64)
        self._levels = np.zeros(cap, dtype=np.int32)
        self._nbr0 = np.zeros((cap, self.M0), dtype=np.int32)
        self._cnt0 = np.zeros(cap, dtype=np.int32)
        self._upper_off = np.full(cap, -1, dtype=np.int64)
        self._nbru = np.zeros((cap_upper, self.M), dtype=np.int32)
        self._cntu = np.zeros(cap_upper, dtype=np.int32)

    def _grow(self, need: int, need_upper: int) -> None:
        cap = self._vecs.shape[0]
        if need > cap:
            new = max(need, 2 * cap)
            for name in ("_vecs", "_inv", "_ord", "_levels", "_nbr0", "_cnt0", "_upper_off"):
                old = getattr(self, name)
                arr = np.full((new,) + old.shape[1:], -1 if name == "_upper_off" else 0, dtype=old.dtype)
                arr[:cap] = old
                setattr(self, name, arr)
        cap_u = self._nbru.shape[0]
        if need_upper > cap_u:
            new = max(need_upper, 2 * cap_u)
            nb = np.zeros((new, self.M), dtype=np.int32)
            nb[:cap_u] = self._nbru
            cn = np.zeros(new, dtype=np.int32)
            cn[:cap_u] = self._cntu
            self._nbru, self._cntu = nb, cn

    def _visited(self) -> Tuple[np.ndarray, np.ndarray]:
        loc = self._local
        buf = getattr(loc, "buf", None)
        if buf is None or buf.shape[0] < self._vecs.shape[0] or loc.tag[0] > _TAG_LIMIT:
            loc.buf = np.zeros(self._vecs.shape[0], dtype=np.int32)
            loc.tag = np.zeros(1, dtype=np.int64)
        return loc.buf, loc.tag

    def __len__(self) -> int:
        return self._n

    def draw_level(self) -> int:
        u = 1.0 - self._rng.random()  # uniform on (0, 1]
        return int(math.floor(-math.log(u) * self.level_mult))

    def insert(self, v: np.ndarray, ordinal: int) -> int:
        q, qinv = _as_query(v, self.dim)
        with self._write_lock:
            level = self.draw_level()
            j = self._n
            self._grow(j + 1, self._n_upper + level)
            self._vecs[j] = q
            self._inv[j] = qinv
            self._ord[j] = ordinal
            self._levels[j] = level
            if level > 0:
                self._upper_off[j] = self._n_upper
                self._n_upper += level
            visited, tag = self._visited()
            self.entry, self.max_level = K.insert_node(
                j, level, self.entry, self.max_level, self.M, self.M0, self.ef_construction,
                self._vecs, self._inv, self._levels, self._nbr0, self._cnt0,
                self._upper_off, self._nbru, self._cntu, visited, tag)
            self._n = j + 1
            return j

    def query(self, v: np.ndarray, k: int, ef: Optional[int] = None) -> Neighbors:
        if k < 1:
            raise ValueError("k must be >= 1")
        q, qinv = _as_query(v, self.dim)
        if self._n == 0:
            return []
        ef = max(ef or self.ef_search, k)
        visited, tag = self._visited()
        d, ids = K.query_graph(q, qinv, k, ef, self.entry, self.max_level, self._vecs, self._inv,
                               self._nbr0, self._cnt0, self._upper_off, self._nbru, self._cntu,
                               self._n, visited, tag)
        return _finish(d, self._ord[ids])

    def vector(self, node: int) -> np.ndarray:
        out = self._vecs[node].copy()
        out.flags.writeable = False
        return out

    def ordinal(self, node: int) -> int:
        return int(self._ord[node])

    def neighbors(self, node: int, level: int) -> np.ndarray:
        if level == 0:
            return self._nbr0[node, : self._cnt0[node]].copy()
        if level > self._levels[node]:
            raise IndexError(f"node {node} has no level {level}")
        r = self._upper_off[node] + level - 1
        return self._nbru[r, : self._cntu[r]].copy()

    def level_of(self, node: int) -> int:
        return int(self._levels[node])

    def validate(self) -> None:
        """Check structural invariants; raises AssertionError on the first violation."""
        n = self._n
        if n == 0:
            assert self.entry == -1
            return
        levels = self._levels[:n]
        assert levels[self.entry] == levels.max() == self.max_level, "entry point not at max level"
        for lc in range(self.max_level + 1):
            cap = self.M0 if lc == 0 else self.M
            members = np.nonzero(levels >= lc)[0]
            member_set = set(members.tolist())
            edges = set()
            for j in members:
                nb = self.neighbors(int(j), lc)
                assert len(nb) <= cap, f"degree {len(nb)} > {cap} at level {lc}"
                assert len(set(nb.tolist())) == len(nb), "duplicate neighbor"
                for e in nb.tolist():
                    assert e in member_set, f"level {lc} link to node {e} not on that level"
                    assert e != j, "self loop"
                    edges.add((int(j), e))
            for a, b in edges:
                assert (b, a) in edges, f"asymmetric link {a}->{b} at level {lc}"

    # persistence

    def snapshot(self) -> bytes:
        n = self._n
        buf = io.BytesIO()
        buf.write(SNAPSHOT_MAGIC)
        buf.write(struct.pack("<HIQ", SNAPSHOT_VERSION, self.dim, n))
        state = rng_state(self._rng).encode("utf-8")
        buf.write(struct.pack("<IIIqiI", self.M, self.ef_construction, self.ef_search,
                              self.entry, self.max_level, len(state)))
        buf.write(state)
        buf.write(self._ord[:n].astype("<u8").tobytes())
        buf.write(self._levels[:n].astype("u1").tobytes())
        buf.write(self._vecs[:n].astype("<f4").tobytes())
        buf.write(self._cnt0[:n].astype("<u2").tobytes())
        ids0 = [self._nbr0[j, : self._cnt0[j]] for j in range(n)]
        buf.write(np.concatenate(ids0 or [np.empty(0, np.int64)]).astype("<u4").tobytes())
        upper = []
        for j in np.nonzero(self._levels[:n] > 0)[0]:
            for lc in range(1, int(self._levels[j]) + 1):
                nb = self.neighbors(int(j), lc)
                upper.append(np.array([len(nb)], dtype="<u4"))
                upper.append(nb.astype("<u4"))
        buf.write(np.concatenate(upper or [np.empty(0, "<u4")]).astype("<u4").tobytes())
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def restore(cls, data: bytes) -> "HNSWIndex":
        if len(data) < 4 + 14 + 4:
            raise CorruptSnapshot("snapshot too short")
        body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
        if body[:4] != SNAPSHOT_MAGIC:
            raise CorruptSnapshot("bad magic")
        if zlib.crc32(body) != crc:
            raise CorruptSnapshot("checksum mismatch")
        try:
            return cls._decode(body)
        except (struct.error, ValueError, IndexError, KeyError) as exc:
            raise CorruptSnapshot(f"malformed snapshot: {exc}") from None

    @classmethod
    def _decode(cls, body: bytes) -> "HNSWIndex":
        version, dim, n = struct.unpack_from("<HIQ", body, 4)
        if version != SNAPSHOT_VERSION:
            raise CorruptSnapshot(f"unsupported snapshot version {version}")
        pos = 4 + 14
        M, efc, efs, entry, max_level, slen = struct.unpack_from("<IIIqiI", body, pos)
        pos += struct.calcsize("<IIIqiI")
        state = body[pos: pos + slen].decode("utf-8")
        pos += slen

        def take(dtype, count):
            nonlocal pos
            size = np.dtype(dtype).itemsize * count
            if pos + size > len(body):
                raise ValueError("section overruns snapshot")
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos)
            pos += size
            return arr

        idx = cls(dim, M=M, ef_construction=efc, ef_search=efs, rng=rng_from_state(state))
        ords = take("<u8", n)
        levels = take("u1", n)
        vecs = take("<f4", n * dim).reshape(n, dim)
        cnt0 = take("<u2", n).astype(np.int32)
        ids0 = take("<u4", int(cnt0.sum()))
        n_upper = int(levels.astype(np.int64).sum())
        idx._grow(max(n, 1), max(n_upper, 1))
        idx._vecs[:n] = vecs
        v64 = vecs.astype(np.float64)
        for j in range(n):
            idx._inv[j] = _inv_norm(v64[j])
        idx._ord[:n] = ords.astype(np.int64)
        idx._levels[:n] = levels
        idx._cnt0[:n] = cnt0
        if cnt0.size and cnt0.max() > idx.M0:
            raise ValueError("level-0 degree exceeds 2M")
        starts = np.concatenate([[0], np.cumsum(cnt0)])
        for j in range(n):
            idx._nbr0[j, : cnt0[j]] = ids0[starts[j]: starts[j + 1]]
        row = 0
        for j in np.nonzero(levels > 0)[0]:
            idx._upper_off[j] = row
            for _ in range(int(levels[j])):
                c = int(take("<u4", 1)[0])
                if c > M:
                    raise ValueError("upper degree exceeds M")
                idx._nbru[row, :c] = take("<u4", c)
                idx._cntu[row] = c
                row += 1
        if pos != len(body):
            raise ValueError("trailing bytes in snapshot")
        if n and not (0 <= entry < n):
            raise ValueError("entry point out of range")
        idx._n = n
        idx._n_upper = n_upper
        idx.entry = int(entry)
        idx.max_level = int(max_level)
        return idx
