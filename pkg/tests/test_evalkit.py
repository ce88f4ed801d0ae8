import json

import numpy as np
import pytest

from foresearch.core import (
    Clip,
    ClipMode,
    IntervalSet,
    Prediction,
    QASample,
    Query,
    Subtask,
    TimeInterval,
    write_jsonl,
)
from foresearch.evalkit import (
    EvalConfig,
    EvalReport,
    MissingVideo,
    SampleMismatch,
    SystemResult,
    emit_report,
    run_benchmark,
    score_sample,
    topk_at_iou,
)
from foresearch.vecindex import SearchHit


def span_hit(start, end, clip_id="c0", score=0.9):
    clip = Clip(
        clip_id=clip_id,
        camera_id="cam0",
        video_id="v0",
        span=TimeInterval(start, end),
        boxes=(),
        mode=ClipMode.FULL_FRAME,
        frame_count=max(1, int(end - start) or 1),
    )
    return SearchHit(clip_id, score, clip)


def mc_sample(i, answer_index=0, video="v0", subtask=Subtask.ACTIVITY, gt=((10.0, 20.0),)):
    return QASample(
        sample_id=f"s{i:04d}",
        video_id=video,
        subtask=subtask,
        query=Query.of(f"question {i}?"),
        options=("a", "b", "c", "d"),
        answer_index=answer_index,
        ground_truth=IntervalSet(tuple(TimeInterval(a, b) for a, b in gt)),
    )


def negative_sample(i, video="v0"):
    return QASample(
        sample_id=f"n{i:04d}",
        video_id=video,
        subtask=Subtask.SEARCH,
        query=Query.of(f"does person {i} appear?"),
        options=("yes, present", "not present"),
        answer_index=1,
        ground_truth=IntervalSet(),
        is_negative=True,
    )


def pred(sample_id, chosen, intervals=(), raw="x"):
    return Prediction(
        sample_id, chosen, IntervalSet(tuple(TimeInterval(a, b) for a, b in intervals)), raw
    )


class TestScoreSample:
    def test_exact_match(self):
        sample = mc_sample(0, answer_index=1)
        correct, tiou = score_sample(sample, pred(sample.sample_id, 1, ((10.0, 20.0),)))
        assert correct and tiou == 1.0

    def test_disjoint_intervals(self):
        sample = mc_sample(0)
        correct, tiou = score_sample(sample, pred(sample.sample_id, 0, ((40.0, 50.0),)))
        assert correct and tiou == 0.0

    def test_partial_interval(self):
        sample = mc_sample(0, gt=((0.0, 10.0),))
        _, tiou = score_sample(sample, pred(sample.sample_id, 0, ((5.0, 15.0),)))
        assert tiou == pytest.approx(1 / 3, abs=1e-9)

    def test_negative_sample_predicted_negative(self):
        sample = negative_sample(0)
        correct, tiou = score_sample(sample, pred(sample.sample_id, 1, ()))
        assert correct and tiou == 1.0

    def test_negative_sample_predicted_positive(self):
        sample = negative_sample(0)
        correct, tiou = score_sample(sample, pred(sample.sample_id, 0, ((5.0, 9.0),)))
        assert not correct and tiou == 0.0

    def test_negative_sample_right_choice_with_spurious_intervals(self):
        sample = negative_sample(0)
        correct, tiou = score_sample(sample, pred(sample.sample_id, 1, ((5.0, 9.0),)))
        assert correct and tiou == 0.0  # strict reading: any interval claims presence

    def test_unparsed_prediction(self):
        sample = negative_sample(0)
        correct, tiou = score_sample(sample, pred(sample.sample_id, None, ()))
        assert not correct and tiou == 0.0
        sample2 = mc_sample(1)
        correct2, tiou2 = score_sample(sample2, pred(sample2.sample_id, None, ()))
        assert not correct2 and tiou2 == 0.0

    def test_own_ground_truth_scores_perfect(self):
        for sample in [mc_sample(0), mc_sample(1, answer_index=3), negative_sample(2)]:
            ideal = Prediction(
                sample.sample_id, sample.answer_index, sample.ground_truth, "oracle"
            )
            assert score_sample(sample, ideal) == (True, 1.0)

    def test_id_mismatch(self):
        with pytest.raises(SampleMismatch):
            score_sample(mc_sample(0), pred("other", 0))


class TestTopkAtIou:
    GT = IntervalSet((TimeInterval(4, 10),))

    def test_any_overlap_at_tau_zero(self):
        assert topk_at_iou([span_hit(0, 5)], self.GT, k=1, tau=0.0)

    def test_strict_threshold(self):
        # IoU([0,5],[4,10]) = 1/10, below 0.3
        assert not topk_at_iou([span_hit(0, 5)], self.GT, k=1, tau=0.3)

    def test_rank_cutoff(self):
        hits = [span_hit(50, 60, "far"), span_hit(4, 10, "match")]
        assert not topk_at_iou(hits, self.GT, k=1, tau=0.0)
        assert topk_at_iou(hits, self.GT, k=2, tau=0.0)

    def test_touching_spans_do_not_count_at_tau_zero(self):
        assert not topk_at_iou([span_hit(0, 4)], self.GT, k=1, tau=0.0)

    def test_monotone_in_k_and_tau(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            hits = [
                span_hit(s, s + rng.uniform(1, 20), f"c{j}")
                for j, s in enumerate(rng.uniform(0, 100, size=rng.integers(1, 8)))
            ]
            a, b = sorted(rng.uniform(0, 100, size=2))
            gt = IntervalSet((TimeInterval(a, b + 1),))
            taus = [0.0, 0.1, 0.3, 0.5]
            ks = [1, 2, 3, 5]
            matrix = [[topk_at_iou(hits, gt, k, t) for t in taus] for k in ks]
            for row in matrix:  # non-increasing in tau
                assert all(int(row[i]) >= int(row[i + 1]) for i in range(len(row) - 1))
            for col in range(len(taus)):  # non-decreasing in k
                assert all(
                    int(matrix[i][col]) <= int(matrix[i + 1][col]) for i in range(len(ks) - 1)
                )


class TestRunBenchmark:
    def test_predictions_dict_basic(self):
        samples = [mc_sample(i, answer_index=i % 4) for i in range(8)]
        preds = {
            s.sample_id: Prediction(s.sample_id, s.answer_index, s.ground_truth, "r")
            for s in samples
        }
        report = run_benchmark(samples, preds)
        assert report.overall["accuracy_pct"] == 100.0
        assert report.overall["mean_tiou_pct"] == 100.0
        assert report.counts["evaluated"] == 8

    def test_constant_choice_on_balanced_suite(self):
        # exactly 25% of answers sit at index 0
        samples = [mc_sample(i, answer_index=i % 4) for i in range(100)]
        preds = {s.sample_id: pred(s.sample_id, 0, ((10.0, 20.0),)) for s in samples}
        report = run_benchmark(samples, preds)
        assert report.overall["accuracy_pct"] == 25.0

    def test_empty_sample_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        report = run_benchmark(path, {})
        assert report.counts["evaluated"] == 0
        assert report.overall == {"count": 0, "accuracy_pct": 0.0, "mean_tiou_pct": 0.0}

    def test_malformed_lines_skipped_and_counted(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        good = mc_sample(0)
        with open(path, "w") as fh:
            fh.write(json.dumps(good.to_dict()) + "\n")
            fh.write(json.dumps({"sample_id": "bad"}) + "\n")
        report = run_benchmark(path, {good.sample_id: pred(good.sample_id, 0, ((10, 20),))})
        assert report.counts["evaluated"] == 1
        assert report.counts["malformed_samples"] == 1

    def test_missing_predictions_scored_as_unparsed(self):
        samples = [mc_sample(0), mc_sample(1)]
        preds = {samples[0].sample_id: pred(samples[0].sample_id, 0, ((10, 20),))}
        report = run_benchmark(samples, preds)
        assert report.counts["missing_predictions"] == 1
        assert report.overall["accuracy_pct"] == 50.0

    def test_live_system_with_hits_builds_retrieval_matrix(self):
        samples = [mc_sample(i, answer_index=i % 4, gt=((10.0, 20.0),)) for i in range(6)]

        def system(sample):
            return SystemResult(
                prediction=Prediction(sample.sample_id, sample.answer_index, sample.ground_truth, "r"),
                hits=(span_hit(10, 20, "good"), span_hit(70, 80, "bad")),
                retrieval_seconds=0.001,
                generation_ttft_seconds=0.002,
                total_seconds=0.004,
            )

        report = run_benchmark(samples, system, EvalConfig(workers=2))
        assert report.retrieval is not None
        top1_row = report.retrieval["matrix"][0]
        assert top1_row[0] == 100.0  # overlap at tau=0 for every sample
        assert report.latency is not None and report.latency["total_mean_s"] > 0

    def test_missing_video_skipped(self):
        samples = [mc_sample(0, video="known"), mc_sample(1, video="ghost")]

        def system(sample):
            if sample.video_id == "ghost":
                raise MissingVideo(sample.video_id)
            return Prediction(sample.sample_id, sample.answer_index, sample.ground_truth, "r")

        report = run_benchmark(samples, system, EvalConfig(workers=1))
        assert report.counts["missing_video"] == 1
        assert report.counts["evaluated"] == 1

    def test_subtask_filter(self):
        samples = [mc_sample(0), negative_sample(1)]
        preds = {s.sample_id: pred(s.sample_id, s.answer_index) for s in samples}
        report = run_benchmark(samples, preds, EvalConfig(subtask_filter=frozenset({"SE"})))
        assert list(report.per_subtask) == ["SE"]

    def test_overall_is_sample_weighted_mean(self):
        samples = [mc_sample(i, answer_index=0, subtask=Subtask.ACTIVITY) for i in range(3)]
        samples += [mc_sample(i + 10, answer_index=0, subtask=Subtask.EVENT) for i in range(1)]
        preds = {s.sample_id: pred(s.sample_id, 0 if i < 2 else 1, ((10, 20),)) for i, s in enumerate(samples)}
        report = run_benchmark(samples, preds)
        weighted = sum(
            b["accuracy_pct"] * b["count"] for b in report.per_subtask.values()
        ) / report.counts["evaluated"]
        assert report.overall["accuracy_pct"] == pytest.approx(weighted)

    def test_report_bytes_deterministic(self):
        samples = [mc_sample(i, answer_index=i % 4) for i in range(20)]
        preds = {s.sample_id: pred(s.sample_id, (i + 1) % 4, ((5.0, 9.0),)) for i, s in enumerate(samples)}
        a = emit_report(run_benchmark(samples, preds), "json")
        b = emit_report(run_benchmark(list(reversed(samples)), preds), "json")
        assert a == b


class TestEmitReport:
    def report(self):
        samples = [mc_sample(i, answer_index=i % 4) for i in range(10)] + [negative_sample(11)]
        preds = {s.sample_id: pred(s.sample_id, s.answer_index, ()) for s in samples}
        return run_benchmark(samples, preds)

    def test_json_round_trip(self):
        report = self.report()
        parsed = json.loads(emit_report(report, "json").decode())
        assert parsed == report.to_dict()
        assert EvalReport.from_dict(parsed).to_dict() == report.to_dict()
        assert parsed["schema"] == "foreseaqa-report/1"

    def test_markdown_rows(self):
        text = emit_report(self.report(), "markdown").decode()
        lines = [l for l in text.splitlines() if l.startswith("|")]
        body = [l for l in lines if not l.startswith("|---") and not l.startswith("| Subtask")]
        assert any(l.startswith("| Avg") for l in body)
        assert len(body) == len(self.report().per_subtask) + 1

    def test_csv_fixed_columns(self):
        text = emit_report(self.report(), "csv").decode()
        rows = [r for r in text.strip().splitlines()]
        assert all(len(r.split(",")) == 4 for r in rows)

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report(self.report(), "yaml")
