"""Builds grounded VideoLMM inputs from retrieved clips and parses answers.

The orchestrator turns the top-K search hits into one multimodal request
under a grounding mode (crop pixels, overlay boxes, or inject coordinates as
text), calls a pluggable VLM backend over HTTP, and parses the reply into a
graded prediction. Parsing never raises: the worst malformed reply becomes an
empty prediction with the raw text preserved.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .core import (
    ForesearchError,
    ImageRef,
    IntervalSet,
    Prediction,
    QASample,
    Query,
    TimeInterval,
    image_ref_bytes,
)
from .encoder import FrameSource, clip_frame_refs, sample_frames
from .imaging import crop_to_box, overlay_box
from .vecindex import SearchHit

SYSTEM_PROMPT_ASSET = "vlm_system_prompt_v1.txt"

_LETTERS = "ABCD"


class VlmUnavailable(ForesearchError):
    """VLM backend could not be reached; retriable."""


class MissingFrames(ForesearchError):
    """The frame provider cannot serve a clip referenced by a hit."""


@dataclass(frozen=True)
class GroundingMode:
    """How retrieved-box information reaches the VLM."""

    crop: bool = False
    overlay: bool = False
    coords: bool = True
    top_k: int = 3
    frames_per_clip: int = 8
    extra_uniform_frames: int = 0
    chronological: bool = False  # default is retrieval-rank order

    def __post_init__(self) -> None:
        if self.crop and self.overlay:
            raise ValueError("crop removes the canvas the overlay would draw on")
        if self.top_k < 1 or self.frames_per_clip < 1:
            raise ValueError("top_k and frames_per_clip must be positive")
        if self.extra_uniform_frames < 0:
            raise ValueError("extra_uniform_frames must be non-negative")


@dataclass(frozen=True)
class TimedFrame:
    timestamp: float
    image: bytes
    clip_id: Optional[str] = None


@dataclass(frozen=True)
class VlmRequest:
    system_prompt: str
    user_text: str
    query_image: Optional[bytes] = None
    frames: tuple = ()

    def __post_init__(self) -> None:
        # frames of one clip must ascend in time (clips themselves may be
        # concatenated in retrieval-rank order; ungrouped frames are exempt)
        last_by_clip: Dict[str, float] = {}
        for frame in self.frames:
            if frame.clip_id is None:
                continue
            prev = last_by_clip.get(frame.clip_id)
            if prev is not None and frame.timestamp < prev:
                raise ValueError("frames within a clip must ascend by timestamp")
            last_by_clip[frame.clip_id] = frame.timestamp

    def to_wire(self) -> dict:
        return {
            "system": self.system_prompt,
            "text": self.user_text,
            "query_image": base64.b64encode(self.query_image).decode("ascii")
            if self.query_image
            else None,
            "images": [
                {"data": base64.b64encode(f.image).decode("ascii"), "timestamp": f.timestamp}
                for f in self.frames
            ],
        }

    @staticmethod
    def from_wire(d: dict) -> "VlmRequest":
        query_image = d.get("query_image")
        return VlmRequest(
            system_prompt=d.get("system", ""),
            user_text=d.get("text", ""),
            query_image=base64.b64decode(query_image) if query_image else None,
            frames=tuple(
                TimedFrame(timestamp=float(img["timestamp"]), image=base64.b64decode(img["data"]))
                for img in d.get("images", [])
            ),
        )


@dataclass(frozen=True)
class VlmResponse:
    raw: str
    chosen_index: Optional[int]
    intervals: IntervalSet
    summary: str = ""
    parse_ok: bool = True
    ttft_seconds: float = 0.0

    def to_prediction(self, sample_id: str) -> Prediction:
        return Prediction(
            sample_id=sample_id,
            chosen_index=self.chosen_index,
            predicted_intervals=self.intervals,
            raw_response=self.raw,
        )


@dataclass(frozen=True)
class VlmReply:
    """Raw backend output plus the time-to-first-token measurement."""

    text: str
    ttft_seconds: float = 0.0


class VlmClient(Protocol):
    def generate(self, request: VlmRequest) -> VlmReply: ...


def system_prompt() -> str:
    return resources.files("foresearch.assets").joinpath(SYSTEM_PROMPT_ASSET).read_text("utf-8")


# ---------------------------------------------------------------------------
# Request assembly
# ---------------------------------------------------------------------------


def _format_box(box) -> str:
    return f"[{box.x:g},{box.y:g},{box.w:g},{box.h:g}]"


def assemble(
    hits: Sequence[SearchHit],
    query: Query,
    sample: Optional[QASample],
    mode: GroundingMode,
    frames: FrameSource,
    warnings: Optional[List[str]] = None,
) -> VlmRequest:
    """Build the VLM request for a query and its retrieved evidence.

    Per hit, ``frames_per_clip`` frames are budget-sampled at source
    resolution; crop/overlay/coords apply per the mode. Clips concatenate in
    retrieval-rank order (chronological behind a flag); every frame carries
    its absolute video timestamp. ``extra_uniform_frames`` whole-video frames
    are appended for the open-domain pattern.
    """
    hits = list(hits)[: mode.top_k]
    if mode.chronological:
        hits = sorted(hits, key=lambda h: (h.clip.span.start, h.clip_id))

    timed: List[TimedFrame] = []
    coord_lines: List[str] = []
    for rank, hit in enumerate(hits, start=1):
        clip = hit.clip
        try:
            fps = frames.get_fps(clip.video_id)
        except KeyError as exc:
            raise MissingFrames(f"provider cannot serve video {clip.video_id}") from exc
        refs = clip_frame_refs(clip, fps, mode.frames_per_clip)
        boxes_seen: List[str] = []
        for frame_index, box in refs:
            try:
                data = frames.get_frame(clip.video_id, frame_index)
            except KeyError as exc:
                raise MissingFrames(f"no frame {frame_index} for video {clip.video_id}") from exc
            if mode.crop:
                if box is not None:
                    data = crop_to_box(data, box)
                elif warnings is not None:
                    warnings.append(f"clip {clip.clip_id}: crop requested but clip has no boxes")
            if mode.overlay and box is not None:
                data = overlay_box(data, box)
            if box is not None:
                boxes_seen.append(_format_box(box))
            timed.append(TimedFrame(timestamp=frame_index / fps, image=data, clip_id=clip.clip_id))
        if mode.coords:
            boxes_part = " ".join(boxes_seen) if boxes_seen else "full frame"
            coord_lines.append(
                f"Clip {rank}: camera {clip.camera_id}, "
                f"time {clip.span.start:.1f}–{clip.span.end:.1f} s, "
                f"bbox per-frame {boxes_part}"
            )

    if mode.extra_uniform_frames > 0 and (sample is not None or hits):
        video_id = sample.video_id if sample is not None else hits[0].clip.video_id
        fps = frames.get_fps(video_id)
        total = frames.get_frame_count(video_id)
        if total > 0:
            for pos in sample_frames(total, mode.extra_uniform_frames):
                try:
                    data = frames.get_frame(video_id, pos)
                except KeyError as exc:
                    raise MissingFrames(f"no frame {pos} for video {video_id}") from exc
                timed.append(TimedFrame(timestamp=pos / fps, image=data, clip_id=None))

    parts = [query.text]
    if coord_lines:
        parts.append("\n".join(coord_lines))
    if sample is not None:
        option_lines = [f"{_LETTERS[i]}. {text}" for i, text in enumerate(sample.options)]
        parts.append("Options:\n" + "\n".join(option_lines))
        parts.append("Reply with the JSON object described in the system prompt.")

    query_image = None
    if query.image is not None:
        query_image = image_ref_bytes(query.image)

    return VlmRequest(
        system_prompt=system_prompt(),
        user_text="\n\n".join(parts),
        query_image=query_image,
        frames=tuple(timed),
    )


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_ANSWER_FALLBACK = re.compile(r"answer\b[^A-Za-z0-9]{0,10}(?:is\s+)?\(?([A-D])\)?\b", re.IGNORECASE)
_INTERVAL_FALLBACK = re.compile(
    r"(\d+(?:\.\d+)?)\s*(?:s|sec|secs|seconds)?\s*(?:–|—|-|to)\s*"
    r"(\d+(?:\.\d+)?)\s*(?:s|sec|secs|seconds)?",
    re.IGNORECASE,
)
_SCHEMA_KEYS = ("answer", "intervals", "summary")


def _clean_interval(start: float, end: float) -> Optional[TimeInterval]:
    try:
        start, end = float(start), float(end)
    except (TypeError, ValueError):
        return None
    if not (np.isfinite(start) and np.isfinite(end)):
        return None
    if start > end:
        start, end = end, start
    start = max(0.0, start)
    end = max(start, end)
    return TimeInterval(start, end)


def _intervals_from_value(value) -> IntervalSet:
    collected: List[TimeInterval] = []
    if isinstance(value, list):
        for item in value:
            iv = None
            if isinstance(item, dict) and "start" in item and "end" in item:
                iv = _clean_interval(item.get("start"), item.get("end"))
            elif isinstance(item, (list, tuple)) and len(item) == 2:
                iv = _clean_interval(item[0], item[1])
            if iv is not None:
                collected.append(iv)
    return IntervalSet(tuple(collected))


def _index_from_answer(value, max_options: int = 4) -> Optional[int]:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value if 0 <= value < max_options else None
    if isinstance(value, str):
        token = value.strip().strip(".()").upper()
        if token in _LETTERS:
            return _LETTERS.index(token)
        if token.isdigit():
            idx = int(token)
            return idx if 0 <= idx < max_options else None
    return None


def _first_schema_object(raw: str) -> Optional[dict]:
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            pos = raw.find("{", pos + 1)
            continue
        if isinstance(obj, dict) and any(key in obj for key in _SCHEMA_KEYS):
            return obj
        pos = raw.find("{", pos + 1)
    return None


def parse_response(raw: str) -> Tuple[Optional[int], IntervalSet]:
    """Parse a backend reply into (chosen option index, intervals).

    Primary path is the JSON answer schema (first balanced object carrying a
    schema key wins); fallbacks are an "answer <letter>" pattern and a
    "<float> to <float>" interval pattern. Never raises; worst case is
    (None, empty set).
    """
    if not raw:
        return None, IntervalSet()

    obj = _first_schema_object(raw)
    if obj is not None:
        chosen = _index_from_answer(obj.get("answer"))
        intervals = _intervals_from_value(obj.get("intervals"))
        return chosen, intervals

    matches = _ANSWER_FALLBACK.findall(raw)
    chosen = _LETTERS.index(matches[-1].upper()) if matches else None
    collected = []
    for m in _INTERVAL_FALLBACK.finditer(raw):
        iv = _clean_interval(m.group(1), m.group(2))
        if iv is not None:
            collected.append(iv)
    return chosen, IntervalSet(tuple(collected))


def _parse_summary(raw: str) -> str:
    obj = _first_schema_object(raw)
    if obj is not None and isinstance(obj.get("summary"), str):
        return obj["summary"]
    return ""


# ---------------------------------------------------------------------------
# Backend calls
# ---------------------------------------------------------------------------

_RETRY_ATTEMPTS = 3
_RETRY_BASE_SECONDS = 0.1


def answer(
    request: VlmRequest,
    backend: VlmClient,
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> VlmResponse:
    """Call the VLM backend and parse its reply.

    Retries transient failures with exponential backoff; a reply that parses
    to nothing is returned with ``parse_ok=False`` and the raw text intact.
    """
    last: Optional[VlmUnavailable] = None
    for attempt in range(_RETRY_ATTEMPTS):
        try:
            reply = backend.generate(request)
            break
        except VlmUnavailable as exc:
            last = exc
            if attempt < _RETRY_ATTEMPTS - 1:
                sleep(_RETRY_BASE_SECONDS * (2**attempt))
    else:
        assert last is not None
        raise last

    chosen, intervals = parse_response(reply.text)
    parse_ok = chosen is not None or not intervals.is_empty
    return VlmResponse(
        raw=reply.text,
        chosen_index=chosen,
        intervals=intervals,
        summary=_parse_summary(reply.text),
        parse_ok=parse_ok,
        ttft_seconds=reply.ttft_seconds,
    )


class HttpVlmClient:
    """VLM backend over the wire protocol: POST {endpoint}/generate.

    For non-streaming backends TTFT is approximated by the full round-trip
    to the response body.
    """

    def __init__(self, endpoint: str, timeout_ms: int = 120_000, client=None):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout_ms / 1000.0)

    def generate(self, request: VlmRequest) -> VlmReply:
        import httpx

        started = time.perf_counter()
        try:
            resp = self._client.post(f"{self.endpoint}/generate", json=request.to_wire())
        except httpx.HTTPError as exc:
            raise VlmUnavailable(f"VLM at {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise VlmUnavailable(f"VLM at {self.endpoint} returned {resp.status_code}")
        return VlmReply(text=resp.json()["text"], ttft_seconds=time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Mock VLM
# ---------------------------------------------------------------------------


def _digest_seed(*parts: str) -> int:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class _TruthEntry:
    question: str
    answer_index: int
    intervals: IntervalSet
    option_count: int


class MockVlm:
    """Oracle-table backend: emits the truth with probability ``fidelity``.

    Otherwise it picks a uniformly wrong option and shifts the ground-truth
    intervals by a uniform offset. Deterministic under a fixed seed; the
    sample is resolved by finding its question text inside the prompt.
    """

    def __init__(self, truth: Dict[str, _TruthEntry], fidelity: float = 1.0, seed: int = 0):
        if not 0.0 <= fidelity <= 1.0:
            raise ValueError("fidelity must lie in [0, 1]")
        self.truth = truth
        self.fidelity = fidelity
        self.seed = seed

    @classmethod
    def from_samples(
        cls, samples: Sequence[QASample], fidelity: float = 1.0, seed: int = 0
    ) -> "MockVlm":
        truth = {
            s.sample_id: _TruthEntry(
                question=s.query.text,
                answer_index=s.answer_index,
                intervals=s.ground_truth,
                option_count=len(s.options),
            )
            for s in samples
        }
        return cls(truth, fidelity=fidelity, seed=seed)

    def _resolve(self, request: VlmRequest) -> Tuple[str, _TruthEntry]:
        best = None
        for sample_id, entry in self.truth.items():
            if entry.question and entry.question in request.user_text:
                if best is None or len(entry.question) > len(best[1].question):
                    best = (sample_id, entry)
        if best is None:
            raise KeyError("no oracle entry matches the request prompt")
        return best

    def generate(self, request: VlmRequest) -> VlmReply:
        sample_id, entry = self._resolve(request)
        rng = np.random.default_rng(_digest_seed(str(self.seed), sample_id))
        truthful = bool(rng.random() < self.fidelity)

        if truthful:
            chosen = entry.answer_index
            intervals = entry.intervals
            summary = "Reported the observed moment."
        else:
            wrong = [i for i in range(entry.option_count) if i != entry.answer_index]
            chosen = int(rng.choice(wrong)) if wrong else entry.answer_index
            shift = float(rng.uniform(10.0, 60.0))
            if entry.intervals.is_empty:
                moved = [TimeInterval(shift, shift + 5.0)]
            else:
                moved = [TimeInterval(iv.start + shift, iv.end + shift) for iv in entry.intervals]
            intervals = IntervalSet(tuple(moved))
            summary = "Reported a different moment."

        body = {
            "answer": _LETTERS[chosen],
            "intervals": intervals.to_list(),
            "summary": summary,
        }
        return VlmReply(text=json.dumps(body), ttft_seconds=0.0)
