"""Client contract to the external multimodal encoder, plus a mock backend.

Clips and queries are embedded into one shared space by an encoder service
reached over HTTP (``POST {endpoint}/encode``). The gateway owns frame-budget
sampling, person-crop preparation, retry/backoff, concurrency limiting, and
L2 normalization, so downstream cosine similarity is a plain dot product.

The mock encoder is the deterministic test backend: every semantic label maps
to a fixed random unit vector drawn from a PCG64 generator seeded by
SHA-256(seed, label), and content embeds as the normalized sum of its label
vectors plus optional Gaussian noise. Identical (labels, seed, noise=0) calls
are bit-identical, distinct labels are near-orthogonal at realistic
dimensions, and a clip is retrievable by its own label's text query — the
geometry the unified-embedding retrieval tests rely on.
"""

from __future__ import annotations

import base64
import hashlib
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .core import (
    BBox,
    Clip,
    ClipMode,
    EmbeddingRecord,
    ForesearchError,
    ImageRef,
    Query,
    QueryModality,
    image_ref_bytes,
)
from .imaging import crop_to_box, extract_label_tags


class EncoderUnavailable(ForesearchError):
    """Encoder could not be reached or answered non-200; retriable."""


class DimensionMismatch(ForesearchError):
    """Vector length differs from the configured dimension; fatal per profile."""


class InvalidQuery(ForesearchError):
    """Query violates the contract (e.g. empty text)."""


@dataclass(frozen=True)
class EncoderProfile:
    endpoint: str = ""
    dimension: int = 64
    frame_budget: int = 16
    timeout_ms: int = 10_000
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.dimension < 8:
            raise ValueError("dimension must be at least 8")
        if self.frame_budget < 1:
            raise ValueError("frame_budget must be at least 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")


class RequestKind(str, Enum):
    CLIP = "clip"
    TEXT_QUERY = "text_query"
    IMAGE_TEXT_QUERY = "image_text_query"


@dataclass(frozen=True)
class EncodeRequest:
    kind: RequestKind
    frames: tuple = ()
    text: Optional[str] = None
    crop_boxes: Optional[tuple] = None  # aligned to frames when present

    def __post_init__(self) -> None:
        if self.kind is RequestKind.CLIP:
            if not self.frames or self.text is not None:
                raise ValueError("clip requests carry frames only")
        elif self.kind is RequestKind.TEXT_QUERY:
            if self.frames or not self.text:
                raise ValueError("text_query requests carry text only")
        else:
            if len(self.frames) != 1 or not self.text:
                raise ValueError("image_text_query requests carry one image plus text")
        if self.crop_boxes is not None and len(self.crop_boxes) != len(self.frames):
            raise ValueError("crop_boxes must align with frames")

    def to_wire(self) -> dict:
        return {
            "kind": self.kind.value,
            "frames": [base64.b64encode(f).decode("ascii") for f in self.frames],
            "text": self.text,
            "crop_boxes": [b.to_dict() for b in self.crop_boxes] if self.crop_boxes else None,
        }

    @staticmethod
    def from_wire(d: dict) -> "EncodeRequest":
        boxes = d.get("crop_boxes")
        return EncodeRequest(
            kind=RequestKind(d["kind"]),
            frames=tuple(base64.b64decode(f) for f in d.get("frames") or ()),
            text=d.get("text"),
            crop_boxes=tuple(BBox.from_dict(b) for b in boxes) if boxes else None,
        )


def sample_frames(frame_count: int, budget: int) -> List[int]:
    """Uniformly sample frame positions so token count fits a fixed budget.

    Returns all positions when the clip fits; otherwise `budget` strictly
    increasing bin midpoints. Deterministic.
    """
    if frame_count < 1 or budget < 1:
        raise ValueError("frame_count and budget must be positive")
    if frame_count <= budget:
        return list(range(frame_count))
    return [int((i + 0.5) * frame_count / budget) for i in range(budget)]


def clip_frame_refs(clip: Clip, fps: float, budget: int) -> List[Tuple[int, Optional[BBox]]]:
    """Budgeted (video frame index, crop box) pairs for a clip.

    Person-centric clips sample their tracked frames (box attached);
    full-frame clips sample evenly across their span at the clip's own rate.
    """
    positions = sample_frames(clip.frame_count, budget)
    if clip.mode is ClipMode.PERSON_CENTRIC:
        return [(clip.boxes[p].frame_index, clip.boxes[p].box) for p in positions]
    length = clip.span.length
    refs: List[Tuple[int, Optional[BBox]]] = []
    for p in positions:
        t = clip.span.start + (p + 0.5) * length / clip.frame_count if length > 0 else clip.span.start
        refs.append((int(round(t * fps)), None))
    return refs


class FrameSource(Protocol):
    """Serves encoded frame bytes and basic video metadata."""

    def get_frame(self, video_id: str, frame_index: int) -> bytes: ...

    def get_fps(self, video_id: str) -> float: ...

    def get_frame_count(self, video_id: str) -> int: ...


class EncoderClient(Protocol):
    def encode(self, request: EncodeRequest) -> Sequence[float]: ...


# ---------------------------------------------------------------------------
# Mock encoder
# ---------------------------------------------------------------------------

_LABEL_TEXT_TOKEN = "label:"


def _digest_seed(*parts: str) -> int:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return vec / norm


def mock_encode(
    labels: Sequence[str],
    seed: int = 0,
    dimension: int = 64,
    noise: float = 0.0,
    salt: str = "",
) -> np.ndarray:
    """Deterministic embedding of a label set.

    Each label's base vector comes from ``default_rng`` (PCG64) seeded with
    SHA-256 of (seed, label); the result is the renormalized sum plus
    Gaussian noise of scale ``noise`` keyed by (seed, labels, salt).
    """
    names = sorted(set(labels))
    if not names:
        raise ValueError("mock_encode requires at least one label")
    acc = np.zeros(dimension, dtype=np.float64)
    for name in names:
        rng = np.random.default_rng(_digest_seed(str(seed), "label", name))
        acc += _unit(rng.standard_normal(dimension))
    vec = _unit(acc)
    if noise > 0.0:
        rng = np.random.default_rng(_digest_seed(str(seed), "noise", salt, *names))
        vec = _unit(vec + rng.normal(0.0, noise, dimension))
    return vec.astype(np.float32)


def request_labels(request: EncodeRequest) -> List[str]:
    """Semantic labels the mock encoder sees in a request.

    Explicit ``label:<name>`` tokens in text and frame bytes win; with none
    present the whole text (whitespace-collapsed) acts as a single label, and
    failing that the first frame's content hash does.
    """
    labels: List[str] = []
    frames = request.frames
    if request.crop_boxes:
        frames = tuple(crop_to_box(f, b) for f, b in zip(frames, request.crop_boxes))
    for frame in frames:
        for name in extract_label_tags(frame):
            if name not in labels:
                labels.append(name)
    if request.text:
        for token in request.text.split():
            if token.startswith(_LABEL_TEXT_TOKEN):
                name = token[len(_LABEL_TEXT_TOKEN):].strip(".,;:!?")
                if name and name not in labels:
                    labels.append(name)
    if not labels:
        if request.text and request.text.strip():
            labels.append(" ".join(request.text.split()))
        elif request.frames:
            labels.append(hashlib.sha256(request.frames[0]).hexdigest()[:16])
    return labels


class MockEncoder:
    """In-process encoder backend with the documented label geometry."""

    def __init__(self, seed: int = 0, dimension: int = 64, noise: float = 0.0):
        self.seed = seed
        self.dimension = dimension
        self.noise = noise

    def encode(self, request: EncodeRequest) -> Sequence[float]:
        labels = request_labels(request)
        salt = hashlib.sha256(
            b"\x1f".join([*(f for f in request.frames), (request.text or "").encode("utf-8")])
        ).hexdigest()
        return mock_encode(labels, self.seed, self.dimension, self.noise, salt=salt).tolist()


class HttpEncoderClient:
    """Encoder reached over the wire protocol: POST {endpoint}/encode."""

    def __init__(self, endpoint: str, timeout_ms: int = 10_000, client=None):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout_ms / 1000.0)

    def encode(self, request: EncodeRequest) -> Sequence[float]:
        import httpx

        try:
            resp = self._client.post(f"{self.endpoint}/encode", json=request.to_wire())
        except httpx.HTTPError as exc:
            raise EncoderUnavailable(f"encoder at {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise EncoderUnavailable(f"encoder at {self.endpoint} returned {resp.status_code}")
        return resp.json()["vector"]


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

_RETRY_ATTEMPTS = 3
_RETRY_BASE_SECONDS = 0.1


class EncoderGateway:
    """Thread-safe front of the encoder: sampling, crops, retries, norms.

    At most ``profile.max_in_flight`` encode calls run concurrently; failed
    calls retry with exponential backoff before the error propagates.
    """

    def __init__(self, client: EncoderClient, profile: EncoderProfile, *, sleep: Callable[[float], None] = time.sleep):
        self.client = client
        self.profile = profile
        self._slots = threading.BoundedSemaphore(profile.max_in_flight)
        self._sleep = sleep

    def _call(self, request: EncodeRequest) -> np.ndarray:
        last: Optional[EncoderUnavailable] = None
        for attempt in range(_RETRY_ATTEMPTS):
            try:
                with self._slots:
                    raw = self.client.encode(request)
                break
            except EncoderUnavailable as exc:
                last = exc
                if attempt < _RETRY_ATTEMPTS - 1:
                    self._sleep(_RETRY_BASE_SECONDS * (2**attempt))
        else:
            assert last is not None
            raise last
        vec = np.asarray(raw, dtype=np.float32)
        if vec.shape != (self.profile.dimension,):
            raise DimensionMismatch(
                f"encoder returned {vec.shape[0] if vec.ndim == 1 else vec.shape} values, "
                f"expected {self.profile.dimension}"
            )
        return vec

    def _normalize(self, vec: np.ndarray) -> Tuple[np.ndarray, float]:
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise DimensionMismatch("encoder returned a zero vector")
        return (vec / norm).astype(np.float32), norm

    def embed_clip(self, clip: Clip, frames: FrameSource) -> EmbeddingRecord:
        refs = clip_frame_refs(clip, frames.get_fps(clip.video_id), self.profile.frame_budget)
        images: List[bytes] = []
        for frame_index, box in refs:
            data = frames.get_frame(clip.video_id, frame_index)
            if box is not None:
                data = crop_to_box(data, box)
            images.append(data)
        request = EncodeRequest(kind=RequestKind.CLIP, frames=tuple(images))
        vec, norm = self._normalize(self._call(request))
        return EmbeddingRecord(clip_id=clip.clip_id, vector=vec, norm=norm)

    def embed_query(self, query: Query) -> np.ndarray:
        if not query.text.strip():
            raise InvalidQuery("query text must be non-empty")
        if query.modality is QueryModality.TEXT_ONLY:
            request = EncodeRequest(kind=RequestKind.TEXT_QUERY, text=query.text)
        else:
            image = image_ref_bytes(query.image)
            request = EncodeRequest(
                kind=RequestKind.IMAGE_TEXT_QUERY, frames=(image,), text=query.text
            )
        vec, _ = self._normalize(self._call(request))
        return vec

    def embed_text(self, text: str, image: Optional[ImageRef] = None) -> np.ndarray:
        if not text or not text.strip():
            raise InvalidQuery("query text must be non-empty")
        return self.embed_query(Query.of(text, image))
