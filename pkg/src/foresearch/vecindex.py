"""Persistent embedding database with exact top-K cosine retrieval.

A flat index: vectors live in one contiguous float32 arena scanned with a
single matrix-vector product, so every search is exact and doubles as ground
truth for the evaluation harness. Approximate search is an extension point
behind the same contract, not something this module does.

Scoring semantics: a hit's score is the float64 dot product of the stored
float32 vector with the float64-normalized query. The fast float32 scan only
preselects candidates; the float64 rescore decides the ranking, which keeps
results bit-reproducible across BLAS kernels.

Concurrency follows a reader-writer contract: searches are lock-free against
a published snapshot (the arena is append-only and the record count is bumped
only after a row is fully written), while inserts and deletes serialize on a
writer lock. Deletes are tombstones, compacted on save.

On-disk layout (all little-endian):

    magic "FSEAIDX1" | dimension u32 | count u64 | metric u8 (0 = cosine)
    count records of: clip_id_len u16 | clip_id utf8 | vector dim x f32
    crc32 u32 over all preceding bytes

Clip metadata lives in a JSON-lines sidecar at ``<path>.meta.jsonl`` keyed by
clip_id; the vector file stays fixed-stride for scan speed.
"""

from __future__ import annotations

import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import Clip, ForesearchError, read_jsonl, write_jsonl

MAGIC = b"FSEAIDX1"
METRIC_COSINE = 0

_HEADER = struct.Struct("<8sIQB")
_U16 = struct.Struct("<H")
_CRC = struct.Struct("<I")


class DuplicateClipId(ForesearchError):
    pass


class DimensionMismatch(ForesearchError):
    pass


class CorruptIndex(ForesearchError):
    pass


@dataclass(frozen=True)
class SearchHit:
    """One retrieval result: cosine score plus joined clip metadata."""

    clip_id: str
    score: float
    clip: Clip

    def to_dict(self) -> dict:
        return {"clip_id": self.clip_id, "score": self.score, "clip": self.clip.to_dict()}


ClipFilter = Callable[[Clip], bool]


def metadata_filter(
    camera_id: Optional[str] = None,
    video_id: Optional[str] = None,
    time_range: Optional[Tuple[float, float]] = None,
) -> Optional[ClipFilter]:
    """Predicate over clip metadata; None when nothing is constrained."""
    if camera_id is None and video_id is None and time_range is None:
        return None

    def accept(clip: Clip) -> bool:
        if camera_id is not None and clip.camera_id != camera_id:
            return False
        if video_id is not None and clip.video_id != video_id:
            return False
        if time_range is not None:
            lo, hi = time_range
            if clip.span.end < lo or clip.span.start > hi:
                return False
        return True

    return accept


class VectorIndex:
    """Exact flat cosine index with clip metadata."""

    def __init__(self, dimension: int, capacity: int = 1024):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self._matrix = np.zeros((max(1, capacity), dimension), dtype=np.float32)
        self._count = 0
        self._ids: List[str] = []
        self._clips: dict = {}
        self._tombstones: frozenset = frozenset()
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return self._count - len(self._tombstones)

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._clips and clip_id not in self._tombstones

    def clip(self, clip_id: str) -> Clip:
        return self._clips[clip_id]

    def clips(self) -> List[Clip]:
        return [self._clips[cid] for cid in self._ids if cid not in self._tombstones]

    # -- writes ------------------------------------------------------------

    def insert(self, record, clip: Clip) -> None:
        vector = np.asarray(record.vector, dtype=np.float32)
        if vector.shape != (self.dimension,):
            raise DimensionMismatch(
                f"record {record.clip_id} has dimension {vector.shape}, index is {self.dimension}"
            )
        if record.clip_id != clip.clip_id:
            raise ValueError("record and clip ids must match")
        with self._write_lock:
            if record.clip_id in self._clips and record.clip_id not in self._tombstones:
                raise DuplicateClipId(record.clip_id)
            if record.clip_id in self._tombstones:
                # reusing a tombstoned id revives it at a fresh row
                self._tombstones = self._tombstones - {record.clip_id}
            if self._count == self._matrix.shape[0]:
                grown = np.zeros((self._matrix.shape[0] * 2, self.dimension), dtype=np.float32)
                grown[: self._count] = self._matrix[: self._count]
                self._matrix = grown
            row = self._count
            self._matrix[row] = vector
            self._ids.append(record.clip_id)
            self._clips[record.clip_id] = clip
            self._count = row + 1  # publish last: rows below count are immutable

    def insert_many(self, items) -> None:
        for record, clip in items:
            self.insert(record, clip)

    def delete(self, clip_id: str) -> None:
        with self._write_lock:
            if clip_id not in self._clips or clip_id in self._tombstones:
                raise KeyError(clip_id)
            self._tombstones = self._tombstones | {clip_id}

    # -- search ------------------------------------------------------------

    # A float32 scan preselects candidates; ranking then rescores them as
    # float64 dot products against the float64-normalized query. The margin
    # absorbs any disagreement between BLAS matvec and per-row accumulation,
    # so the final order is bit-reproducible and matches a full-precision
    # brute-force scan, tie order included.
    _RESCORE_MARGIN = 1e-4

    def search(
        self,
        query_vector: Sequence[float],
        k: int,
        clip_filter: Optional[ClipFilter] = None,
    ) -> List[SearchHit]:
        """The k highest-cosine records passing the filter, exact.

        Hits sort by score descending with ties broken by ascending clip_id;
        an empty index yields an empty list.
        """
        if k < 1:
            raise ValueError("k must be positive")
        # snapshot: count published after rows are written, ids append-only
        count = self._count
        tombstones = self._tombstones
        if count == 0:
            return []

        q64 = np.asarray(query_vector, dtype=np.float64)
        if q64.shape != (self.dimension,):
            raise DimensionMismatch(f"query has shape {q64.shape}, index is {self.dimension}")
        norm = float(np.linalg.norm(q64))
        if norm == 0.0:
            raise ValueError("query vector must be non-zero")
        q64 = q64 / norm
        q32 = q64.astype(np.float32)

        scores = self._matrix[:count] @ q32

        if tombstones or clip_filter is not None:
            keep = [
                i
                for i in range(count)
                if self._ids[i] not in tombstones
                and (clip_filter is None or clip_filter(self._clips[self._ids[i]]))
            ]
            if not keep:
                return []
            candidates = np.asarray(keep, dtype=np.int64)
        else:
            candidates = None

        pool = scores if candidates is None else scores[candidates]
        n = pool.shape[0]
        if n > k:
            top = np.argpartition(-pool, k - 1)[:k]
            boundary = pool[top].min() - self._RESCORE_MARGIN
            chosen = np.flatnonzero(pool >= boundary)
        else:
            chosen = np.arange(n)

        rows = chosen if candidates is None else candidates[chosen]
        ranked = sorted(
            (
                (float(self._matrix[r].astype(np.float64) @ q64), self._ids[r])
                for r in rows
            ),
            key=lambda it: (-it[0], it[1]),
        )[:k]
        return [SearchHit(clip_id=cid, score=s, clip=self._clips[cid]) for s, cid in ranked]

    # -- persistence --------------------------------------------------------

    @staticmethod
    def _sidecar(path) -> Path:
        return Path(str(path) + ".meta.jsonl")

    def save(self, path) -> None:
        """Write the vector file and metadata sidecar; tombstones compact away."""
        with self._write_lock:
            live = [
                (self._ids[i], self._matrix[i].copy())
                for i in range(self._count)
                if self._ids[i] not in self._tombstones
            ]
            clips = [self._clips[cid] for cid, _ in live]

        out = bytearray()
        out += _HEADER.pack(MAGIC, self.dimension, len(live), METRIC_COSINE)
        for cid, vec in live:
            encoded = cid.encode("utf-8")
            out += _U16.pack(len(encoded))
            out += encoded
            out += vec.astype("<f4").tobytes()
        out += _CRC.pack(zlib.crc32(bytes(out)) & 0xFFFFFFFF)

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(bytes(out))
        write_jsonl(self._sidecar(path), (c.to_dict() for c in clips))

    @classmethod
    def load(cls, path) -> "VectorIndex":
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise CorruptIndex(f"cannot read index file {path}: {exc}") from exc

        if len(blob) < _HEADER.size + _CRC.size:
            raise CorruptIndex("index file truncated before header")
        magic, dimension, count, metric = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CorruptIndex(f"bad magic {magic!r}")
        if metric != METRIC_COSINE:
            raise CorruptIndex(f"unknown metric {metric}")

        body, (stored_crc,) = blob[: -_CRC.size], _CRC.unpack(blob[-_CRC.size:])
        if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
            raise CorruptIndex("checksum mismatch")

        index = cls(dimension, capacity=max(1, count))
        offset = _HEADER.size
        vec_bytes = dimension * 4
        for _ in range(count):
            if offset + _U16.size > len(body):
                raise CorruptIndex("truncated record header")
            (id_len,) = _U16.unpack_from(body, offset)
            offset += _U16.size
            if offset + id_len + vec_bytes > len(body):
                raise CorruptIndex("truncated record payload")
            clip_id = body[offset : offset + id_len].decode("utf-8")
            offset += id_len
            vec = np.frombuffer(body, dtype="<f4", count=dimension, offset=offset).copy()
            offset += vec_bytes
            if clip_id in index._clips:
                raise CorruptIndex(f"duplicate clip id {clip_id} in index file")
            row = index._count
            if row == index._matrix.shape[0]:
                grown = np.zeros((row * 2, dimension), dtype=np.float32)
                grown[:row] = index._matrix[:row]
                index._matrix = grown
            index._matrix[row] = vec
            index._ids.append(clip_id)
            index._count = row + 1
        if offset != len(body):
            raise CorruptIndex("trailing bytes after records")

        sidecar = cls._sidecar(path)
        if not sidecar.exists():
            raise CorruptIndex(f"missing metadata sidecar {sidecar}")
        for row_dict in read_jsonl(sidecar):
            clip = Clip.from_dict(row_dict)
            index._clips[clip.clip_id] = clip
        missing = [cid for cid in index._ids if cid not in index._clips]
        if missing:
            raise CorruptIndex(f"sidecar missing metadata for {missing[:3]}...")
        return index
