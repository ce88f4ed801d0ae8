"""Benchmark protocol: joint answer accuracy and temporal-grounding metrics.

Grades a system (live callable or recorded predictions file) against a QA
file and emits per-subtask and aggregate reports, including the retrieval
Top-K@IoU matrix when hit logs are available. Scoring follows the negative-
search conventions: a ground-truth-negative sample scores temporal IoU 1 only
when the prediction is negative too (correct absent option, no intervals),
and 0 whenever presence is predicted or nothing parseable was produced.

Samples may be evaluated concurrently, but aggregation always walks results
in sorted sample_id order so floating-point sums are reproducible; a report
built from recorded predictions is byte-deterministic.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .core import (
    ForesearchError,
    IntervalSet,
    Prediction,
    QASample,
    QueryModality,
    Subtask,
    dumps_canonical,
    interval_set_iou,
    read_jsonl,
)
from .vecindex import SearchHit

REPORT_SCHEMA = "foreseaqa-report/1"

_SUBTASK_ORDER = [s.value for s in Subtask]


class SampleMismatch(ForesearchError):
    pass


class MissingVideo(ForesearchError):
    """Raised by a live system when a sample's video is not indexed."""


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.0, 0.1, 0.3)
    ks: tuple = (1, 3, 5, 10)
    subtask_filter: Optional[frozenset] = None
    workers: int = 4

    def __post_init__(self) -> None:
        taus = self.iou_thresholds
        if any(not 0.0 <= t < 1.0 for t in taus) or list(taus) != sorted(taus):
            raise ValueError("iou thresholds must be ascending values in [0, 1)")
        if any(k < 1 for k in self.ks):
            raise ValueError("ks must be positive")


def score_sample(sample: QASample, pred: Prediction) -> Tuple[bool, float]:
    """Grade one prediction: (answer correct, temporal IoU)."""
    if sample.sample_id != pred.sample_id:
        raise SampleMismatch(f"prediction {pred.sample_id} graded against sample {sample.sample_id}")

    correct = pred.chosen_index is not None and pred.chosen_index == sample.answer_index

    if sample.is_negative:
        declined = pred.chosen_index is None and pred.predicted_intervals.is_empty
        predicts_presence = (not pred.predicted_intervals.is_empty) or (
            pred.chosen_index is not None and pred.chosen_index != sample.answer_index
        )
        if declined or predicts_presence:
            tiou = 0.0
        else:
            tiou = 1.0
    else:
        tiou = interval_set_iou(pred.predicted_intervals, sample.ground_truth)
    return correct, tiou


def topk_at_iou(hits: Sequence[SearchHit], gt: IntervalSet, k: int, tau: float) -> bool:
    """Whether any of the first k hits' spans clears the IoU threshold.

    At tau=0 the test is positive-measure overlap; above 0 it is a strict
    IoU comparison.
    """
    for hit in hits[:k]:
        span_set = IntervalSet((hit.clip.span,))
        if tau > 0.0:
            if interval_set_iou(span_set, gt) > tau:
                return True
        else:
            overlap = sum(hit.clip.span.overlap(iv) for iv in gt)
            if overlap > 0.0:
                return True
    return False


@dataclass(frozen=True)
class SystemResult:
    """One live evaluation step: the prediction plus its evidence and timings."""

    prediction: Prediction
    hits: Optional[tuple] = None
    retrieval_seconds: Optional[float] = None
    generation_ttft_seconds: Optional[float] = None
    total_seconds: Optional[float] = None


SystemFn = Callable[[QASample], Union[SystemResult, Prediction]]


@dataclass
class _Row:
    sample: QASample
    correct: bool
    tiou: float
    hits: Optional[tuple]
    retrieval_s: Optional[float]
    ttft_s: Optional[float]
    total_s: Optional[float]
    parsed: bool


def _aggregate(values: List[float]) -> float:
    return sum(values) / len(values) if values else 0.0


@dataclass
class EvalReport:
    schema: str
    config: dict
    counts: dict
    per_subtask: dict
    per_modality: dict
    overall: dict
    retrieval: Optional[dict]
    latency: Optional[dict]

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "config": self.config,
            "counts": self.counts,
            "per_subtask": self.per_subtask,
            "per_modality": self.per_modality,
            "overall": self.overall,
            "retrieval": self.retrieval,
            "latency": self.latency,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            schema=d["schema"],
            config=d["config"],
            counts=d["counts"],
            per_subtask=d["per_subtask"],
            per_modality=d["per_modality"],
            overall=d["overall"],
            retrieval=d.get("retrieval"),
            latency=d.get("latency"),
        )


def load_samples(source) -> Tuple[List[QASample], int]:
    """Samples from a JSONL path or an in-memory sequence; returns the
    number of malformed lines skipped."""
    if isinstance(source, (str, Path)):
        samples: List[QASample] = []
        malformed = 0
        for row in read_jsonl(source):
            try:
                samples.append(QASample.from_dict(row))
            except (KeyError, ValueError, TypeError):
                malformed += 1
        return samples, malformed
    return list(source), 0


def load_predictions(source) -> Dict[str, Prediction]:
    if isinstance(source, (str, Path)):
        preds = [Prediction.from_dict(row) for row in read_jsonl(source)]
    else:
        preds = list(source)
    return {p.sample_id: p for p in preds}


def run_benchmark(
    samples_source,
    system: Union[SystemFn, str, Path, Sequence[Prediction], Dict[str, Prediction]],
    cfg: Optional[EvalConfig] = None,
) -> EvalReport:
    """Evaluate a system or a predictions file over a QA file.

    Aggregation is deterministic; malformed samples and missing videos are
    skipped and counted rather than failing the run.
    """
    cfg = cfg or EvalConfig()
    samples, malformed = load_samples(samples_source)
    if cfg.subtask_filter is not None:
        samples = [s for s in samples if s.subtask.value in cfg.subtask_filter]

    predictions: Optional[Dict[str, Prediction]] = None
    if not callable(system):
        if isinstance(system, dict):
            predictions = system
        else:
            predictions = load_predictions(system)

    missing_video = 0
    missing_predictions = 0
    rows: Dict[str, _Row] = {}

    def grade(sample: QASample, pred: Prediction, hits, retrieval_s, ttft_s, total_s) -> _Row:
        correct, tiou = score_sample(sample, pred)
        parsed = pred.chosen_index is not None or not pred.predicted_intervals.is_empty
        return _Row(sample, correct, tiou, hits, retrieval_s, ttft_s, total_s, parsed)

    if predictions is not None:
        for sample in samples:
            pred = predictions.get(sample.sample_id)
            if pred is None:
                missing_predictions += 1
                pred = Prediction(sample.sample_id, None, IntervalSet(), raw_response="")
            rows[sample.sample_id] = grade(sample, pred, None, None, None, None)
    else:

        def run_one(sample: QASample):
            started = time.perf_counter()
            try:
                out = system(sample)
            except MissingVideo:
                return sample.sample_id, None
            elapsed = time.perf_counter() - started
            if isinstance(out, Prediction):
                out = SystemResult(prediction=out)
            total = out.total_seconds if out.total_seconds is not None else elapsed
            return sample.sample_id, grade(
                sample, out.prediction, out.hits, out.retrieval_seconds,
                out.generation_ttft_seconds, total,
            )

        if cfg.workers > 1 and len(samples) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(run_one, samples))
        else:
            outcomes = [run_one(s) for s in samples]
        for sample_id, row in outcomes:
            if row is None:
                missing_video += 1
            else:
                rows[sample_id] = row

    ordered = [rows[sid] for sid in sorted(rows)]

    def block(selection: List[_Row]) -> dict:
        return {
            "count": len(selection),
            "accuracy_pct": round(100.0 * _aggregate([1.0 if r.correct else 0.0 for r in selection]), 4),
            "mean_tiou_pct": round(100.0 * _aggregate([r.tiou for r in selection]), 4),
        }

    per_subtask = {
        code: block([r for r in ordered if r.sample.subtask.value == code])
        for code in _SUBTASK_ORDER
        if any(r.sample.subtask.value == code for r in ordered)
    }
    per_modality = {
        modality.value: block(selection)
        for modality in QueryModality
        if (selection := [r for r in ordered if r.sample.query.modality is modality])
    }
    overall = block(ordered)

    retrieval = None
    logged = [r for r in ordered if r.hits is not None and not r.sample.ground_truth.is_empty]
    if logged:
        matrix = []
        for k in cfg.ks:
            row = []
            for tau in cfg.iou_thresholds:
                good = sum(
                    1 for r in logged if topk_at_iou(list(r.hits), r.sample.ground_truth, k, tau)
                )
                row.append(round(100.0 * good / len(logged), 4))
            matrix.append(row)
        retrieval = {
            "ks": list(cfg.ks),
            "iou_thresholds": list(cfg.iou_thresholds),
            "matrix": matrix,
            "count": len(logged),
        }

    latency = None
    timed = [r for r in ordered if r.total_s is not None]
    if predictions is None and timed:
        latency = {
            "retrieval_mean_s": round(_aggregate([r.retrieval_s for r in timed if r.retrieval_s is not None]), 6),
            "generation_ttft_mean_s": round(_aggregate([r.ttft_s for r in timed if r.ttft_s is not None]), 6),
            "total_mean_s": round(_aggregate([r.total_s for r in timed]), 6),
        }

    return EvalReport(
        schema=REPORT_SCHEMA,
        config={
            "iou_thresholds": list(cfg.iou_thresholds),
            "ks": list(cfg.ks),
            "subtask_filter": sorted(cfg.subtask_filter) if cfg.subtask_filter else None,
        },
        counts={
            "evaluated": len(ordered),
            "malformed_samples": malformed,
            "missing_video": missing_video,
            "missing_predictions": missing_predictions,
            "parse_failures": sum(1 for r in ordered if not r.parsed),
        },
        per_subtask=per_subtask,
        per_modality=per_modality,
        overall=overall,
        retrieval=retrieval,
        latency=latency,
    )


def emit_report(report: EvalReport, fmt: str = "json") -> bytes:
    """Serialize a report. JSON is the canonical machine format; markdown
    mirrors the per-subtask Acc/IoU table layout; CSV has fixed columns."""
    if fmt == "json":
        return (dumps_canonical(report.to_dict()) + "\n").encode("utf-8")

    if fmt == "markdown":
        lines = ["| Subtask | N | Acc (%) | IoU (%) |", "|---|---:|---:|---:|"]
        for code in _SUBTASK_ORDER:
            if code in report.per_subtask:
                b = report.per_subtask[code]
                lines.append(f"| {code} | {b['count']} | {b['accuracy_pct']:.1f} | {b['mean_tiou_pct']:.1f} |")
        o = report.overall
        lines.append(f"| Avg | {o['count']} | {o['accuracy_pct']:.1f} | {o['mean_tiou_pct']:.1f} |")
        if report.retrieval:
            lines.append("")
            taus = report.retrieval["iou_thresholds"]
            lines.append("| Top-K | " + " | ".join(f"@{t:g}" for t in taus) + " |")
            lines.append("|---|" + "---:|" * len(taus))
            for k, row in zip(report.retrieval["ks"], report.retrieval["matrix"]):
                lines.append(f"| Top-{k} | " + " | ".join(f"{v:.1f}" for v in row) + " |")
        return ("\n".join(lines) + "\n").encode("utf-8")

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["subtask", "count", "accuracy_pct", "mean_tiou_pct"])
        for code in _SUBTASK_ORDER:
            if code in report.per_subtask:
                b = report.per_subtask[code]
                writer.writerow([code, b["count"], b["accuracy_pct"], b["mean_tiou_pct"]])
        o = report.overall
        writer.writerow(["overall", o["count"], o["accuracy_pct"], o["mean_tiou_pct"]])
        return buf.getvalue().encode("utf-8")

    raise ValueError(f"unknown report format {fmt!r}")
