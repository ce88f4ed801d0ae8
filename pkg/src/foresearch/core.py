"""Shared domain types, interval algebra, and canonical JSON codecs.

All types here are immutable value objects and safe to share between threads.
Timestamps are seconds relative to the start of the source video; wall-clock
time is never used for scoring. The ``to_dict``/``from_dict`` pairs define the
canonical JSON encoding used by every file format and API in the package
(intervals are always ``{"start": float, "end": float}``).
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator, Optional, Sequence, Union

import numpy as np


class ForesearchError(Exception):
    """Base class for errors raised by this package."""


# ---------------------------------------------------------------------------
# Intervals
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class TimeInterval:
    """A closed time interval [start, end] in video-relative seconds."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"interval bounds must be finite, got [{self.start}, {self.end}]")
        if self.start < 0:
            raise ValueError(f"interval start must be non-negative, got {self.start}")
        if self.start > self.end:
            raise ValueError(f"interval start {self.start} exceeds end {self.end}")

    @property
    def length(self) -> float:
        return self.end - self.start

    def overlap(self, other: "TimeInterval") -> float:
        """Measure of the intersection with ``other`` (0 if disjoint)."""
        return max(0.0, min(self.end, other.end) - max(self.start, other.start))

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end}

    @staticmethod
    def from_dict(d: dict) -> "TimeInterval":
        return TimeInterval(float(d["start"]), float(d["end"]))


def interval_iou(a: TimeInterval, b: TimeInterval) -> float:
    """Temporal IoU of two intervals: |a∩b| / |a∪b|.

    Two degenerate point intervals have IoU 1 when equal and 0 otherwise,
    so the ratio is total on valid inputs.
    """
    inter = a.overlap(b)
    union = a.length + b.length - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


@dataclass(frozen=True)
class IntervalSet:
    """A canonical set of intervals: sorted by start, pairwise disjoint.

    Construction merges overlapping and touching intervals, so evidence spans
    behave as continuous time rather than half-open bins. May be empty, which
    represents "no relevant moment".
    """

    intervals: tuple = ()

    def __post_init__(self) -> None:
        merged = _merge(self.intervals)
        object.__setattr__(self, "intervals", merged)

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    @property
    def measure(self) -> float:
        return sum(iv.length for iv in self.intervals)

    def __iter__(self) -> Iterator[TimeInterval]:
        return iter(self.intervals)

    def __len__(self) -> int:
        return len(self.intervals)

    def to_list(self) -> list:
        return [iv.to_dict() for iv in self.intervals]

    @staticmethod
    def from_list(items: Iterable[dict]) -> "IntervalSet":
        return IntervalSet(tuple(TimeInterval.from_dict(d) for d in items))


def _merge(intervals: Sequence[TimeInterval]) -> tuple:
    if not intervals:
        return ()
    ordered = sorted(intervals, key=lambda iv: (iv.start, iv.end))
    merged = [ordered[0]]
    for iv in ordered[1:]:
        last = merged[-1]
        if iv.start <= last.end:  # overlapping or touching
            if iv.end > last.end:
                merged[-1] = TimeInterval(last.start, iv.end)
        else:
            merged.append(iv)
    return tuple(merged)


def canonicalize(intervals: Iterable[TimeInterval]) -> IntervalSet:
    """Sort and merge intervals into canonical form; total measure preserved."""
    return IntervalSet(tuple(intervals))


def _intersection_measure(a: IntervalSet, b: IntervalSet) -> float:
    # Both sets are sorted and disjoint; a two-pointer sweep is exact.
    total = 0.0
    i = j = 0
    ai, bi = a.intervals, b.intervals
    while i < len(ai) and j < len(bi):
        total += ai[i].overlap(bi[j])
        if ai[i].end <= bi[j].end:
            i += 1
        else:
            j += 1
    return total


def interval_set_iou(pred: IntervalSet, gt: IntervalSet) -> float:
    """Union-wise temporal IoU between two interval sets.

    measure(pred ∩ gt) / measure(pred ∪ gt). Both empty → 1.0; exactly one
    empty → 0.0, matching the negative-search scoring conventions.
    """
    if pred.is_empty and gt.is_empty:
        return 1.0
    if pred.is_empty or gt.is_empty:
        return 0.0
    inter = _intersection_measure(pred, gt)
    union = pred.measure + gt.measure - inter
    if union <= 0.0:
        # All intervals degenerate; equal point sets count as a perfect match.
        return 1.0 if pred == gt else 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Geometry and detection-stream types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels: top-left corner plus width/height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got x={self.x} y={self.y}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def iou(self, other: "BBox") -> float:
        ix = max(0.0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0.0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @staticmethod
    def from_dict(d: dict) -> "BBox":
        return BBox(float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]))


@dataclass(frozen=True)
class Detection:
    """One detector output for one frame; input to the tracking stage."""

    video_id: str
    frame_index: int
    timestamp: float
    box: BBox
    score: float
    class_label: str = "person"

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "frame_index": self.frame_index,
            "timestamp": self.timestamp,
            "box": self.box.to_dict(),
            "score": self.score,
            "class_label": self.class_label,
        }

    @staticmethod
    def from_dict(d: dict) -> "Detection":
        return Detection(
            video_id=str(d["video_id"]),
            frame_index=int(d["frame_index"]),
            timestamp=float(d["timestamp"]),
            box=BBox.from_dict(d["box"]),
            score=float(d["score"]),
            class_label=str(d.get("class_label", "person")),
        )


@dataclass(frozen=True)
class Observation:
    """One tracked position: frame index, timestamp, and box."""

    frame_index: int
    timestamp: float
    box: BBox

    def to_dict(self) -> dict:
        return {"frame_index": self.frame_index, "timestamp": self.timestamp, "box": self.box.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "Observation":
        return Observation(int(d["frame_index"]), float(d["timestamp"]), BBox.from_dict(d["box"]))


@dataclass(frozen=True)
class Track:
    """A single person's trajectory through one video."""

    track_id: str
    video_id: str
    observations: tuple

    def __post_init__(self) -> None:
        if not self.observations:
            raise ValueError("track must have at least one observation")
        frames = [o.frame_index for o in self.observations]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"track {self.track_id} observations must be strictly increasing by frame")

    def to_dict(self) -> dict:
        return {
            "track_id": self.track_id,
            "video_id": self.video_id,
            "observations": [o.to_dict() for o in self.observations],
        }

    @staticmethod
    def from_dict(d: dict) -> "Track":
        return Track(
            track_id=str(d["track_id"]),
            video_id=str(d["video_id"]),
            observations=tuple(Observation.from_dict(o) for o in d["observations"]),
        )


class ClipMode(str, Enum):
    PERSON_CENTRIC = "person_centric"
    FULL_FRAME = "full_frame"


@dataclass(frozen=True)
class ClipBox:
    """Per-frame box carried by a person-centric clip."""

    frame_index: int
    box: BBox

    def to_dict(self) -> dict:
        return {"frame_index": self.frame_index, "box": self.box.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "ClipBox":
        return ClipBox(int(d["frame_index"]), BBox.from_dict(d["box"]))


@dataclass(frozen=True)
class Clip:
    """The unit of indexing: a person-centric (or full-frame) video segment."""

    clip_id: str
    camera_id: str
    video_id: str
    span: TimeInterval
    boxes: tuple
    mode: ClipMode
    frame_count: int

    def __post_init__(self) -> None:
        if self.frame_count < 1:
            raise ValueError("frame_count must be positive")
        if self.mode is ClipMode.PERSON_CENTRIC and not self.boxes:
            raise ValueError(f"person-centric clip {self.clip_id} must carry boxes")
        if self.mode is ClipMode.FULL_FRAME and self.boxes:
            raise ValueError(f"full-frame clip {self.clip_id} must not carry boxes")

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "camera_id": self.camera_id,
            "video_id": self.video_id,
            "span": self.span.to_dict(),
            "boxes": [b.to_dict() for b in self.boxes],
            "mode": self.mode.value,
            "frame_count": self.frame_count,
        }

    @staticmethod
    def from_dict(d: dict) -> "Clip":
        return Clip(
            clip_id=str(d["clip_id"]),
            camera_id=str(d["camera_id"]),
            video_id=str(d["video_id"]),
            span=TimeInterval.from_dict(d["span"]),
            boxes=tuple(ClipBox.from_dict(b) for b in d.get("boxes", [])),
            mode=ClipMode(d["mode"]),
            frame_count=int(d["frame_count"]),
        )


# ---------------------------------------------------------------------------
# Embeddings, queries, and benchmark samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingRecord:
    """A unit-norm vector bound to a clip id; the unit of retrieval.

    ``norm`` records the L2 norm the encoder returned before the gateway
    re-normalized; ``vector`` itself is always unit length within 1e-6.
    """

    clip_id: str
    vector: np.ndarray = field(compare=False)
    norm: float = 1.0

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise ValueError("embedding vector must be one-dimensional")
        vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dimension(self) -> int:
        return int(self.vector.shape[0])

    def to_dict(self) -> dict:
        return {"clip_id": self.clip_id, "vector": [float(v) for v in self.vector], "norm": self.norm}

    @staticmethod
    def from_dict(d: dict) -> "EmbeddingRecord":
        return EmbeddingRecord(str(d["clip_id"]), np.asarray(d["vector"], dtype=np.float32), float(d["norm"]))


# Image references travel either as raw bytes or as a URI/path string.
ImageRef = Union[bytes, str]

_DATA_URI_PREFIX = "data:application/octet-stream;base64,"


def encode_image_ref(image: Optional[ImageRef]) -> Optional[str]:
    """JSON form of an image reference: bytes become a base64 data URI."""
    if image is None:
        return None
    if isinstance(image, bytes):
        return _DATA_URI_PREFIX + base64.b64encode(image).decode("ascii")
    return image


def decode_image_ref(value: Optional[str]) -> Optional[ImageRef]:
    if value is None:
        return None
    if value.startswith("data:") and ";base64," in value:
        return base64.b64decode(value.split(";base64,", 1)[1])
    return value


def image_ref_bytes(image: ImageRef, loader=None) -> bytes:
    """Materialize an image reference as bytes; URIs go through ``loader``."""
    if isinstance(image, bytes):
        return image
    if loader is not None:
        return loader(image)
    with open(image, "rb") as fh:
        return fh.read()


class QueryModality(str, Enum):
    TEXT_ONLY = "text_only"
    IMAGE_TEXT = "image_text"


@dataclass(frozen=True)
class Query:
    """Search input: text plus an optional reference image."""

    text: str
    image: Optional[ImageRef] = None
    modality: QueryModality = QueryModality.TEXT_ONLY

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("query text must be non-empty")
        expected = QueryModality.IMAGE_TEXT if self.image is not None else QueryModality.TEXT_ONLY
        if self.modality is not expected:
            raise ValueError(f"modality {self.modality.value} inconsistent with image presence")

    @staticmethod
    def of(text: str, image: Optional[ImageRef] = None) -> "Query":
        modality = QueryModality.IMAGE_TEXT if image is not None else QueryModality.TEXT_ONLY
        return Query(text=text, image=image, modality=modality)

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "image": encode_image_ref(self.image),
            "modality": self.modality.value,
        }

    @staticmethod
    def from_dict(d: dict) -> "Query":
        return Query.of(str(d["text"]), decode_image_ref(d.get("image")))


class Subtask(str, Enum):
    SEARCH = "SE"
    ACTIVITY = "AC"
    EVENT = "EV"
    TEMPORAL = "TM"
    COUNTING = "CT"
    ANOMALY = "AN"


@dataclass(frozen=True)
class QASample:
    """One benchmark question with its grading key."""

    sample_id: str
    video_id: str
    subtask: Subtask
    query: Query
    options: tuple
    answer_index: int
    ground_truth: IntervalSet
    is_negative: bool = False

    def __post_init__(self) -> None:
        n = len(self.options)
        if not 2 <= n <= 4:
            raise ValueError(f"sample {self.sample_id}: expected 2-4 options, got {n}")
        if not 0 <= self.answer_index < n:
            raise ValueError(f"sample {self.sample_id}: answer_index {self.answer_index} out of range")
        if self.subtask is not Subtask.SEARCH and n < 3:
            raise ValueError(f"sample {self.sample_id}: only search questions may be binary")
        if self.is_negative and not self.ground_truth.is_empty:
            raise ValueError(f"sample {self.sample_id}: negative samples must have empty ground truth")
        if self.is_negative and self.subtask is not Subtask.SEARCH:
            raise ValueError(f"sample {self.sample_id}: negatives exist only for the search subtask")

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "video_id": self.video_id,
            "subtask": self.subtask.value,
            "query": self.query.to_dict(),
            "options": list(self.options),
            "answer_index": self.answer_index,
            "ground_truth": self.ground_truth.to_list(),
            "is_negative": self.is_negative,
        }

    @staticmethod
    def from_dict(d: dict) -> "QASample":
        return QASample(
            sample_id=str(d["sample_id"]),
            video_id=str(d["video_id"]),
            subtask=Subtask(d["subtask"]),
            query=Query.from_dict(d["query"]),
            options=tuple(str(o) for o in d["options"]),
            answer_index=int(d["answer_index"]),
            ground_truth=IntervalSet.from_list(d.get("ground_truth", [])),
            is_negative=bool(d.get("is_negative", False)),
        )


@dataclass(frozen=True)
class Prediction:
    """A model's graded output for one sample.

    ``chosen_index`` is None when the model declined or its output could not
    be parsed; intervals are always stored in canonical form.
    """

    sample_id: str
    chosen_index: Optional[int]
    predicted_intervals: IntervalSet
    raw_response: str = ""

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "chosen_index": self.chosen_index,
            "predicted_intervals": self.predicted_intervals.to_list(),
            "raw_response": self.raw_response,
        }

    @staticmethod
    def from_dict(d: dict) -> "Prediction":
        chosen = d.get("chosen_index")
        return Prediction(
            sample_id=str(d["sample_id"]),
            chosen_index=None if chosen is None else int(chosen),
            predicted_intervals=IntervalSet.from_list(d.get("predicted_intervals", [])),
            raw_response=str(d.get("raw_response", "")),
        )


# ---------------------------------------------------------------------------
# JSON plumbing
# ---------------------------------------------------------------------------


def dumps_canonical(obj: Any) -> str:
    """Compact, deterministic JSON used for all on-disk and wire encodings."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps_canonical(row))
            fh.write("\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: malformed JSON line: {exc}") from exc
