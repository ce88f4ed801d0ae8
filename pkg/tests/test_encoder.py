import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foresearch.core import BBox, Clip, ClipBox, ClipMode, Query, TimeInterval
from foresearch.encoder import (
    DimensionMismatch,
    EncodeRequest,
    EncoderGateway,
    EncoderProfile,
    EncoderUnavailable,
    InvalidQuery,
    MockEncoder,
    RequestKind,
    clip_frame_refs,
    mock_encode,
    sample_frames,
)
from foresearch.imaging import make_labeled_png
from tests.synth import Scenario, MovingPerson, SyntheticFrameSource


def make_clip(n_frames=12, clip_id="v#t0000/c000", fps=10.0):
    boxes = tuple(ClipBox(f, BBox(50, 100, 40, 80)) for f in range(n_frames))
    return Clip(
        clip_id=clip_id,
        camera_id="cam0",
        video_id="v_enc",
        span=TimeInterval(0.0, (n_frames - 1) / fps),
        boxes=boxes,
        mode=ClipMode.PERSON_CENTRIC,
        frame_count=n_frames,
    )


def scenario_for(n_frames=12, label="red_jacket", video_id="v_enc"):
    return Scenario(
        video_id=video_id,
        persons=[MovingPerson(label, 0, n_frames - 1, x0=50, y0=100)],
    )


class TestSampleFrames:
    def test_budget_below_count(self):
        assert sample_frames(8, 4) == [1, 3, 5, 7]

    def test_budget_above_count(self):
        assert sample_frames(3, 8) == [0, 1, 2]

    def test_large_clip(self):
        assert sample_frames(100, 4) == [12, 37, 62, 87]

    def test_single_frame(self):
        assert sample_frames(1, 16) == [0]

    @given(m=st.integers(1, 5000), budget=st.integers(1, 128))
    @settings(max_examples=200)
    def test_strictly_increasing_within_range(self, m, budget):
        out = sample_frames(m, budget)
        assert len(out) == min(m, budget)
        assert all(0 <= i < m for i in out)
        assert all(b > a for a, b in zip(out, out[1:]))


class TestMockEncode:
    def test_deterministic(self):
        a = mock_encode(["red_jacket"], seed=7, dimension=64)
        b = mock_encode(["red_jacket"], seed=7, dimension=64)
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-6)

    def test_independent_labels_nearly_orthogonal(self):
        # Random unit vectors at dimension 512 concentrate near orthogonality.
        vecs = [mock_encode([f"label_{i}"], seed=3, dimension=512) for i in range(46)]
        worst = max(
            abs(float(np.dot(a, b))) for a, b in itertools.combinations(vecs, 2)
        )  # 1035 pairs
        assert worst < 0.2

    def test_shared_label_increases_similarity(self):
        a = mock_encode(["a"], seed=1, dimension=256)
        ab = mock_encode(["a", "b"], seed=1, dimension=256)
        c = mock_encode(["c"], seed=1, dimension=256)
        assert float(np.dot(ab, a)) > float(np.dot(c, a))

    def test_noise_perturbs_but_preserves_direction(self):
        # component noise 0.02 at dim 256 perturbs the direction by ~0.3 rad
        clean = mock_encode(["x"], seed=2, dimension=256)
        noisy = mock_encode(["x"], seed=2, dimension=256, noise=0.02, salt="clip1")
        other = mock_encode(["x"], seed=2, dimension=256, noise=0.02, salt="clip2")
        assert float(np.dot(clean, noisy)) > 0.9
        assert not np.array_equal(noisy, other)

    def test_label_order_irrelevant(self):
        assert np.array_equal(
            mock_encode(["a", "b"], seed=0, dimension=64),
            mock_encode(["b", "a"], seed=0, dimension=64),
        )

    def test_requires_labels(self):
        with pytest.raises(ValueError):
            mock_encode([], seed=0, dimension=64)


class TestEncodeRequest:
    def test_kind_invariants(self):
        with pytest.raises(ValueError):
            EncodeRequest(kind=RequestKind.CLIP, frames=())
        with pytest.raises(ValueError):
            EncodeRequest(kind=RequestKind.TEXT_QUERY, text=None)
        with pytest.raises(ValueError):
            EncodeRequest(kind=RequestKind.IMAGE_TEXT_QUERY, frames=(b"a", b"b"), text="x")

    def test_wire_round_trip(self):
        req = EncodeRequest(
            kind=RequestKind.IMAGE_TEXT_QUERY,
            frames=(make_labeled_png((8, 8), ["z"]),),
            text="find label:z",
        )
        assert EncodeRequest.from_wire(req.to_wire()) == req


class TestGateway:
    def profile(self, dim=64, budget=16):
        return EncoderProfile(dimension=dim, frame_budget=budget)

    def gateway(self, dim=64, budget=16, seed=0, noise=0.0):
        return EncoderGateway(MockEncoder(seed=seed, dimension=dim, noise=noise), self.profile(dim, budget))

    def test_clip_embedding_unit_norm_and_label_geometry(self):
        scenario = scenario_for(label="red_jacket")
        frames = SyntheticFrameSource([scenario])
        gw = self.gateway()
        rec = gw.embed_clip(make_clip(), frames)
        assert rec.dimension == 64
        assert float(np.linalg.norm(rec.vector)) == pytest.approx(1.0, abs=1e-6)

        other = gw.embed_clip(make_clip(clip_id="v#t0001/c000"), frames)
        assert float(np.dot(rec.vector, other.vector)) >= 0.95

    def test_query_and_clip_share_space(self):
        scenario = scenario_for(label="red_jacket")
        frames = SyntheticFrameSource([scenario])
        gw = self.gateway()
        rec = gw.embed_clip(make_clip(), frames)
        qvec = gw.embed_query(Query.of("label:red_jacket"))
        assert float(np.dot(rec.vector, qvec)) >= 0.95

    def test_image_text_query_matches_clip(self):
        scenario = scenario_for(label="red_jacket")
        frames = SyntheticFrameSource([scenario])
        gw = self.gateway()
        rec = gw.embed_clip(make_clip(), frames)
        crop = make_labeled_png((32, 64), ["red_jacket"])
        qvec = gw.embed_query(Query.of("when does this person appear?", image=crop))
        assert float(np.dot(rec.vector, qvec)) >= 0.95

    def test_text_query_deterministic(self):
        gw = self.gateway()
        a = gw.embed_query(Query.of("person riding a bike"))
        b = gw.embed_query(Query.of("person riding a bike"))
        assert np.array_equal(a, b)

    def test_single_frame_clip_request(self):
        seen = []

        class Recorder:
            def __init__(self, inner):
                self.inner = inner

            def encode(self, request):
                seen.append(request)
                return self.inner.encode(request)

        scenario = scenario_for(n_frames=1)
        frames = SyntheticFrameSource([scenario])
        gw = EncoderGateway(Recorder(MockEncoder(dimension=64)), self.profile(budget=16))
        gw.embed_clip(make_clip(n_frames=1), frames)
        assert len(seen) == 1 and len(seen[0].frames) == 1

    def test_dimension_mismatch(self):
        class ShortEncoder:
            def encode(self, request):
                return [0.5] * 63

        gw = EncoderGateway(ShortEncoder(), self.profile(dim=64))
        with pytest.raises(DimensionMismatch):
            gw.embed_query(Query.of("anything"))

    def test_empty_text_rejected(self):
        gw = self.gateway()
        with pytest.raises(InvalidQuery):
            gw.embed_text("   ")

    def test_retry_then_success(self):
        calls = {"n": 0}

        class Flaky:
            def encode(self, request):
                calls["n"] += 1
                if calls["n"] < 3:
                    raise EncoderUnavailable("down")
                return MockEncoder(dimension=64).encode(request)

        naps = []
        gw = EncoderGateway(Flaky(), self.profile(), sleep=naps.append)
        vec = gw.embed_query(Query.of("label:x"))
        assert calls["n"] == 3
        assert naps == [0.1, 0.2]
        assert float(np.linalg.norm(vec)) == pytest.approx(1.0, abs=1e-6)

    def test_retries_exhausted(self):
        class Down:
            def encode(self, request):
                raise EncoderUnavailable("down")

        gw = EncoderGateway(Down(), self.profile(), sleep=lambda s: None)
        with pytest.raises(EncoderUnavailable):
            gw.embed_query(Query.of("label:x"))

    def test_max_in_flight_enforced(self):
        active = {"now": 0, "peak": 0}
        lock = threading.Lock()
        release = threading.Event()

        class SlowEncoder:
            def encode(self, request):
                with lock:
                    active["now"] += 1
                    active["peak"] = max(active["peak"], active["now"])
                release.wait(timeout=2.0)
                with lock:
                    active["now"] -= 1
                return MockEncoder(dimension=64).encode(request)

        profile = EncoderProfile(dimension=64, max_in_flight=3)
        gw = EncoderGateway(SlowEncoder(), profile)
        threads = [
            threading.Thread(target=lambda: gw.embed_query(Query.of("label:x")))
            for _ in range(8)
        ]
        for t in threads:
            t.start()
        import time

        time.sleep(0.3)
        release.set()
        for t in threads:
            t.join()
        assert active["peak"] <= 3


class TestClipFrameRefs:
    def test_person_centric_uses_tracked_frames(self):
        clip = make_clip(n_frames=8)
        refs = clip_frame_refs(clip, fps=10.0, budget=4)
        assert [f for f, _ in refs] == [1, 3, 5, 7]
        assert all(box is not None for _, box in refs)

    def test_full_frame_spreads_over_span(self):
        clip = Clip(
            clip_id="v#w0000",
            camera_id="cam0",
            video_id="v",
            span=TimeInterval(10.0, 20.0),
            boxes=(),
            mode=ClipMode.FULL_FRAME,
            frame_count=10,
        )
        refs = clip_frame_refs(clip, fps=10.0, budget=100)
        assert len(refs) == 10
        assert all(box is None for _, box in refs)
        assert refs[0][0] >= 100 and refs[-1][0] <= 200
