import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewseq.data import (
    Dataset,
    SyntheticSpec,
    VideoSample,
    generate_synthetic,
    load_dataset,
    sample_episode,
    save_dataset,
    segment_centers,
    sparse_sample_frames,
)
from fewseq.errors import DataError


def make_video(L, D=4, vid=0, cid=0, seed=0):
    rng = np.random.default_rng(seed)
    return VideoSample(video_id=vid, frames=rng.standard_normal((L, D)).astype(np.float32), class_id=cid)


class TestSegmentCenters:
    def test_matches_center_formula(self):
        for L, t in [(16, 8), (8, 8), (3, 8), (1, 4), (100, 7), (5, 5)]:
            expected = [int((k + 0.5) * L // t) for k in range(t)]
            assert segment_centers(L, t).tolist() == expected

    def test_known_values(self):
        assert segment_centers(16, 8).tolist() == [1, 3, 5, 7, 9, 11, 13, 15]
        assert segment_centers(8, 8).tolist() == list(range(8))
        assert segment_centers(3, 8).tolist() == [0, 0, 0, 1, 1, 2, 2, 2]

    @given(L=st.integers(1, 200), t=st.integers(1, 64))
    @settings(max_examples=200, deadline=None)
    def test_monotone_and_in_bounds(self, L, t):
        idx = segment_centers(L, t)
        assert (np.diff(idx) >= 0).all()
        assert idx.min() >= 0 and idx.max() <= L - 1


class TestSparseSampleFrames:
    def test_eval_is_pure(self):
        v = make_video(13)
        a = sparse_sample_frames(v, 8, "eval")
        b = sparse_sample_frames(v, 8, "eval")
        np.testing.assert_array_equal(a, b)
        assert a.shape == (8, 4)

    def test_eval_short_video_repeats(self):
        v = make_video(3)
        out = sparse_sample_frames(v, 8, "eval")
        np.testing.assert_array_equal(out, v.frames[[0, 0, 0, 1, 1, 2, 2, 2]])

    @given(L=st.integers(1, 60), t=st.integers(1, 24), seed=st.integers(0, 10))
    @settings(max_examples=150, deadline=None)
    def test_train_mode_in_segments(self, L, t, seed):
        v = make_video(L)
        rng = np.random.default_rng(seed)
        out = sparse_sample_frames(v, t, "train", rng)
        assert out.shape == (t, 4)
        # recover indices by matching rows and check monotonicity
        idx = [int(np.flatnonzero((v.frames == row).all(axis=1))[0]) for row in out]
        assert all(a <= b for a, b in zip(idx, idx[1:]))

    def test_bad_mode(self):
        with pytest.raises(DataError):
            sparse_sample_frames(make_video(4), 2, "test")


@pytest.fixture(scope="module")
def small_dataset():
    return generate_synthetic(SyntheticSpec(num_classes=10, samples_per_class=6, seed=3))


class TestSampleEpisode:
    def test_shapes_5way_1shot(self, small_dataset):
        rng = np.random.default_rng(0)
        ep = sample_episode(small_dataset, "base", 5, 1, 1, rng)
        assert ep.way == 5 and ep.shot == 1
        assert len(ep.support) == 5 and all(len(g) == 1 for g in ep.support)
        assert len(ep.queries) == 5

    def test_shapes_5way_5shot(self, small_dataset):
        rng = np.random.default_rng(0)
        ep = sample_episode(small_dataset, "base", 5, 5, 1, rng)
        assert sum(len(g) for g in ep.support) == 25
        assert all(len(g) == 5 for g in ep.support)

    def test_support_query_disjoint(self, small_dataset):
        rng = np.random.default_rng(1)
        ep = sample_episode(small_dataset, "base", 4, 2, 2, rng)
        support_ids = {s.video_id for g in ep.support for s in g}
        query_ids = {q.video_id for q, _ in ep.queries}
        assert not (support_ids & query_ids)

    def test_deterministic_given_rng(self, small_dataset):
        ep1 = sample_episode(small_dataset, "novel", 3, 1, 1, np.random.default_rng(42))
        ep2 = sample_episode(small_dataset, "novel", 3, 1, 1, np.random.default_rng(42))
        assert ep1.global_class_ids == ep2.global_class_ids
        ids1 = [s.video_id for g in ep1.support for s in g] + [q.video_id for q, _ in ep1.queries]
        ids2 = [s.video_id for g in ep2.support for s in g] + [q.video_id for q, _ in ep2.queries]
        assert ids1 == ids2

    def test_insufficient_classes(self, small_dataset):
        with pytest.raises(DataError, match="insufficient-classes.*novel"):
            sample_episode(small_dataset, "novel", 50, 1, 1, np.random.default_rng(0))

    def test_insufficient_samples(self, small_dataset):
        with pytest.raises(DataError, match="insufficient-samples-in-class"):
            sample_episode(small_dataset, "base", 2, 5, 3, np.random.default_rng(0))

    def test_class_coverage_uniform(self, small_dataset):
        # every base class should be hit at its expected rate over many draws
        rng = np.random.default_rng(7)
        base = small_dataset.classes.split_ids("base")
        way, draws = 3, 10_000
        counts = {c: 0 for c in base}
        for _ in range(draws):
            ep = sample_episode(small_dataset, "base", way, 1, 1, rng)
            for c in ep.global_class_ids:
                counts[c] += 1
        p = way / len(base)
        sigma = np.sqrt(draws * p * (1 - p))
        for c, n in counts.items():
            assert abs(n - draws * p) < 5 * sigma, f"class {c} count {n}"


class TestGenerateSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(num_classes=5, samples_per_class=3, seed=11)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert len(a.samples) == len(b.samples) == 15
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.frames, sb.frames)

    def test_zero_noise_static_frames_identical(self):
        spec = SyntheticSpec(
            num_classes=4, samples_per_class=5, visual_noise_sigma=0.0,
            class_signal_strength=1.0, temporal_pattern="static", seed=2,
        )
        ds = generate_synthetic(spec)
        for cid, samples in ds.by_class().items():
            ref = samples[0].frames[0]
            np.testing.assert_array_equal(ds.classes.latents[cid], ref)
            for s in samples:
                assert (s.frames == ref).all()

    @pytest.mark.parametrize("pattern", ["static", "drifting", "permuted-motif"])
    def test_patterns_build_and_are_finite(self, pattern):
        ds = generate_synthetic(
            SyntheticSpec(num_classes=3, samples_per_class=2, temporal_pattern=pattern, seed=5)
        )
        for s in ds.samples:
            assert np.isfinite(s.frames).all()

    def test_split_fraction(self):
        ds = generate_synthetic(SyntheticSpec(num_classes=88, samples_per_class=1, seed=0))
        assert len(ds.classes.base_ids) == 64
        assert len(ds.classes.novel_ids) == 24

    def test_invalid_spec(self):
        with pytest.raises(DataError, match="invalid-spec"):
            generate_synthetic(SyntheticSpec(num_classes=1))
        with pytest.raises(DataError, match="invalid-spec"):
            generate_synthetic(SyntheticSpec(visual_noise_sigma=-1.0))
        with pytest.raises(DataError, match="invalid-spec"):
            generate_synthetic(SyntheticSpec(temporal_pattern="wavy"))


class TestDatasetFile:
    def test_round_trip(self, tmp_path, small_dataset):
        path = str(tmp_path / "data.fsards")
        save_dataset(small_dataset, path)
        loaded = load_dataset(path)
        assert loaded.classes.names == small_dataset.classes.names
        assert loaded.classes.base_ids == small_dataset.classes.base_ids
        assert loaded.classes.novel_ids == small_dataset.classes.novel_ids
        np.testing.assert_array_equal(loaded.classes.latents, small_dataset.classes.latents)
        assert len(loaded.samples) == len(small_dataset.samples)
        for a, b in zip(loaded.samples, small_dataset.samples):
            assert (a.video_id, a.class_id) == (b.video_id, b.class_id)
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_truncated_body(self, tmp_path, small_dataset):
        path = str(tmp_path / "data.fsards")
        save_dataset(small_dataset, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-10])
        with pytest.raises(DataError, match="malformed-file.*record"):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "data.fsards")
        open(path, "wb").write(b"NOTADATASET\nend_header\n")
        with pytest.raises(DataError, match="malformed-file"):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        from fewseq.errors import IOFailure

        with pytest.raises(IOFailure, match="io-failure"):
            load_dataset(str(tmp_path / "nope.fsards"))

    def test_round_trip_without_latents(self, tmp_path, small_dataset):
        from fewseq.data import ClassTable

        table = ClassTable(
            names=small_dataset.classes.names,
            base_ids=small_dataset.classes.base_ids,
            novel_ids=small_dataset.classes.novel_ids,
            latents=None,
        )
        ds = Dataset(samples=small_dataset.samples, classes=table)
        path = str(tmp_path / "plain.fsards")
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.classes.latents is None
