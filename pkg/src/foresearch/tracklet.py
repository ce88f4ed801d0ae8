"""Turns per-frame detection streams into person tracks and indexable clips.

The tracker is a two-tier IoU association scheme: high-confidence detections
are matched to live tracks first, leftover tracks then get a second chance
against low-confidence detections. Detections are ingested from an upstream
detector, never computed here. Tracking different videos is independent and
may run concurrently; within one video association is sequential by frame.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import (
    BBox,
    Clip,
    ClipBox,
    ClipMode,
    Detection,
    ForesearchError,
    Observation,
    TimeInterval,
    Track,
)


class OutOfOrderFrames(ForesearchError):
    """Frame indices regressed within one video's detection stream."""


class Assignment(str, Enum):
    GREEDY = "greedy"
    OPTIMAL = "optimal"


class Motion(str, Enum):
    NONE = "none"
    CONSTANT_VELOCITY = "constant_velocity"


@dataclass(frozen=True)
class TrackerConfig:
    iou_gate: float = 0.3
    high_score: float = 0.6
    low_score: float = 0.1
    max_gap_frames: int = 30
    min_track_len: int = 5
    motion: Motion = Motion.CONSTANT_VELOCITY
    assignment: Assignment = Assignment.GREEDY

    def __post_init__(self) -> None:
        if not 0 < self.iou_gate <= 1:
            raise ValueError("iou_gate must lie in (0, 1]")
        if self.low_score >= self.high_score:
            raise ValueError("low_score must be below high_score")
        if self.min_track_len < 1:
            raise ValueError("min_track_len must be at least 1")


@dataclass(frozen=True)
class ClipPolicy:
    split_gap_seconds: float = 2.0
    max_clip_seconds: float = 30.0
    mode: ClipMode = ClipMode.PERSON_CENTRIC
    full_frame_window_seconds: float = 10.0
    full_frame_fps: float = 1.0

    def __post_init__(self) -> None:
        if self.split_gap_seconds <= 0:
            raise ValueError("split_gap_seconds must be positive")
        if self.max_clip_seconds <= self.split_gap_seconds:
            raise ValueError("max_clip_seconds must exceed split_gap_seconds")


@dataclass(frozen=True)
class VideoManifest:
    """Sidecar metadata that accompanies a detection stream."""

    video_id: str
    camera_id: str
    fps: float
    duration_seconds: float
    source: Optional[str] = None  # frame directory or source URI

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "camera_id": self.camera_id,
            "fps": self.fps,
            "duration_seconds": self.duration_seconds,
            "source": self.source,
        }

    @staticmethod
    def from_dict(d: dict) -> "VideoManifest":
        return VideoManifest(
            video_id=str(d["video_id"]),
            camera_id=str(d["camera_id"]),
            fps=float(d["fps"]),
            duration_seconds=float(d["duration_seconds"]),
            source=d.get("source") or d.get("frame_dir"),
        )


class _LiveTrack:
    __slots__ = ("ordinal", "observations", "last_frame")

    def __init__(self, ordinal: int, obs: Observation):
        self.ordinal = ordinal
        self.observations: List[Observation] = [obs]
        self.last_frame = obs.frame_index

    def add(self, obs: Observation) -> None:
        self.observations.append(obs)
        self.last_frame = obs.frame_index

    def predicted_box(self, frame_index: int, motion: Motion) -> BBox:
        last = self.observations[-1]
        if motion is Motion.NONE or len(self.observations) < 2:
            return last.box
        prev = self.observations[-2]
        dt = last.frame_index - prev.frame_index
        steps = frame_index - last.frame_index
        # Extrapolate position only; size is kept from the last observation.
        vx = (last.box.x - prev.box.x) / dt
        vy = (last.box.y - prev.box.y) / dt
        x = max(0.0, last.box.x + vx * steps)
        y = max(0.0, last.box.y + vy * steps)
        return BBox(x, y, last.box.w, last.box.h)


def _match(
    tracks: Sequence[_LiveTrack],
    boxes: Sequence[BBox],
    detections: Sequence[Detection],
    gate: float,
    assignment: Assignment,
) -> Tuple[List[Tuple[int, int]], List[int], List[int]]:
    """Match tracks to detections by IoU. Returns (pairs, unmatched_track_idx,
    unmatched_det_idx); pairs are (track_idx, det_idx). Ties break toward the
    older track (lower ordinal) for determinism."""
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))

    iou = [[boxes[t].iou(detections[d].box) for d in range(len(detections))] for t in range(len(tracks))]

    pairs: List[Tuple[int, int]] = []
    if assignment is Assignment.OPTIMAL:
        import numpy as np
        from scipy.optimize import linear_sum_assignment

        cost = -np.asarray(iou)
        rows, cols = linear_sum_assignment(cost)
        for r, c in sorted(zip(rows, cols), key=lambda rc: (tracks[rc[0]].ordinal, rc[1])):
            if iou[r][c] >= gate:
                pairs.append((r, c))
    else:
        candidates = [
            (iou[t][d], tracks[t].ordinal, d, t)
            for t in range(len(tracks))
            for d in range(len(detections))
            if iou[t][d] >= gate
        ]
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        used_t: set = set()
        used_d: set = set()
        for _, _, d, t in candidates:
            if t in used_t or d in used_d:
                continue
            used_t.add(t)
            used_d.add(d)
            pairs.append((t, d))

    matched_t = {t for t, _ in pairs}
    matched_d = {d for _, d in pairs}
    unmatched_t = [t for t in range(len(tracks)) if t not in matched_t]
    unmatched_d = [d for d in range(len(detections)) if d not in matched_d]
    return pairs, unmatched_t, unmatched_d


def associate(detections: Iterable[Detection], cfg: Optional[TrackerConfig] = None) -> List[Track]:
    """Assign detections to tracks, one pass per video.

    Per frame: live tracks are motion-predicted, high-score detections are
    matched first (IoU-gated), remaining tracks retry against low-score
    detections, and leftover high-score detections open new tracks. A track
    unmatched for more than ``max_gap_frames`` closes; tracks shorter than
    ``min_track_len`` are dropped. Only "person" detections are considered.
    Deterministic for a fixed input order and config.
    """
    cfg = cfg or TrackerConfig()

    by_video: Dict[str, List[Detection]] = {}
    for det in detections:
        if det.class_label != "person":
            continue
        by_video.setdefault(det.video_id, []).append(det)

    tracks: List[Track] = []
    for video_id, dets in by_video.items():
        tracks.extend(_associate_video(video_id, dets, cfg))
    return tracks


def _associate_video(video_id: str, dets: Sequence[Detection], cfg: TrackerConfig) -> List[Track]:
    last_frame = -1
    for det in dets:
        if det.frame_index < last_frame:
            raise OutOfOrderFrames(
                f"video {video_id}: frame {det.frame_index} after frame {last_frame}"
            )
        last_frame = det.frame_index

    live: List[_LiveTrack] = []
    finished: List[_LiveTrack] = []
    counter = itertools.count()

    for frame_index, group in itertools.groupby(dets, key=lambda d: d.frame_index):
        frame_dets = list(group)
        high = [d for d in frame_dets if d.score >= cfg.high_score]
        low = [d for d in frame_dets if cfg.low_score <= d.score < cfg.high_score]

        still_live: List[_LiveTrack] = []
        for tr in live:
            if frame_index - tr.last_frame > cfg.max_gap_frames:
                finished.append(tr)
            else:
                still_live.append(tr)
        live = still_live

        predicted = [tr.predicted_box(frame_index, cfg.motion) for tr in live]

        pairs, unmatched_t, unmatched_d = _match(live, predicted, high, cfg.iou_gate, cfg.assignment)
        for t, d in pairs:
            det = high[d]
            live[t].add(Observation(det.frame_index, det.timestamp, det.box))

        leftovers = [live[t] for t in unmatched_t]
        leftover_boxes = [predicted[t] for t in unmatched_t]
        pairs2, _, _ = _match(leftovers, leftover_boxes, low, cfg.iou_gate, cfg.assignment)
        for t, d in pairs2:
            det = low[d]
            leftovers[t].add(Observation(det.frame_index, det.timestamp, det.box))

        for d in unmatched_d:
            det = high[d]
            live.append(_LiveTrack(next(counter), Observation(det.frame_index, det.timestamp, det.box)))

    finished.extend(live)
    finished.sort(key=lambda tr: tr.ordinal)

    out: List[Track] = []
    for tr in finished:
        if len(tr.observations) < cfg.min_track_len:
            continue
        out.append(
            Track(
                track_id=f"{video_id}#t{tr.ordinal:04d}",
                video_id=video_id,
                observations=tuple(tr.observations),
            )
        )
    return out


def tracks_to_clips(
    tracks: Iterable[Track],
    policy: ClipPolicy,
    manifests: Dict[str, VideoManifest],
) -> List[Clip]:
    """Segment tracks into person-centric clips.

    A track splits wherever consecutive observations are more than
    ``split_gap_seconds`` apart, then further so no clip span exceeds
    ``max_clip_seconds``. Camera id comes from the video manifest.
    """
    if policy.mode is not ClipMode.PERSON_CENTRIC:
        raise ValueError("tracks_to_clips requires a person_centric policy")

    clips: List[Clip] = []
    for track in tracks:
        manifest = manifests.get(track.video_id)
        if manifest is None:
            raise KeyError(f"no manifest for video {track.video_id}")
        segments: List[List[Observation]] = [[track.observations[0]]]
        for obs in track.observations[1:]:
            segment = segments[-1]
            gap = obs.timestamp - segment[-1].timestamp
            too_long = obs.timestamp - segment[0].timestamp > policy.max_clip_seconds
            if gap > policy.split_gap_seconds or too_long:
                segments.append([obs])
            else:
                segment.append(obs)

        for j, segment in enumerate(segments):
            clips.append(
                Clip(
                    clip_id=f"{track.track_id}/c{j:03d}",
                    camera_id=manifest.camera_id,
                    video_id=track.video_id,
                    span=TimeInterval(segment[0].timestamp, segment[-1].timestamp),
                    boxes=tuple(ClipBox(o.frame_index, o.box) for o in segment),
                    mode=ClipMode.PERSON_CENTRIC,
                    frame_count=len(segment),
                )
            )
    return clips


def full_frame_clips(manifest: VideoManifest, policy: ClipPolicy) -> List[Clip]:
    """Partition a whole video into fixed windows (the scene-level index mode)."""
    if policy.mode is not ClipMode.FULL_FRAME:
        raise ValueError("full_frame_clips requires a full_frame policy")

    clips: List[Clip] = []
    window = policy.full_frame_window_seconds
    start = 0.0
    j = 0
    while start < manifest.duration_seconds:
        end = min(start + window, manifest.duration_seconds)
        frame_count = max(1, round((end - start) * policy.full_frame_fps))
        clips.append(
            Clip(
                clip_id=f"{manifest.video_id}#w{j:04d}",
                camera_id=manifest.camera_id,
                video_id=manifest.video_id,
                span=TimeInterval(start, end),
                boxes=(),
                mode=ClipMode.FULL_FRAME,
                frame_count=frame_count,
            )
        )
        start = end
        j += 1
    return clips
