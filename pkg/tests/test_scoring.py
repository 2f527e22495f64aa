"""Windowed cosine scoring: window grids, pair scores, caching and fusion."""

import numpy as np
import pytest

from avatarprint.embedder import EmbedderConfig, init_params
from avatarprint.feature_store import NormalizationParams
from avatarprint.scoring import (
    EmbeddingCache,
    PairScore,
    ScoreRow,
    ScoringError,
    cosine,
    fuse,
    make_windows,
    read_score_table,
    score_pair,
    score_trials,
    video_window_embeddings,
    window_starts,
    write_score_table,
)

from helpers import double_loop_pair_score, random_store


def make_params(dim=6, window_len=8, seed=0, normalization=None):
    cfg = EmbedderConfig(
        input_dim=dim, heads=2, attention_dim=8, projection_dim=4,
        window_len=window_len, seed=seed,
    )
    return init_params(cfg, normalization)


class TestWindows:
    def test_start_grid(self):
        assert window_starts(10, 4, 2) == [0, 2, 4, 6]
        assert window_starts(4, 4, 2) == [0]
        assert window_starts(3, 4, 2) == []
        assert window_starts(11, 4, 2) == [0, 2, 4, 6]  # trailing frames dropped

    def test_count_formula(self):
        for window in range(2, 33, 2):
            stride = window // 2
            for frames in range(1, 65):
                starts = window_starts(frames, window, stride)
                expected = 0 if frames < window else (frames - window) // stride + 1
                assert len(starts) == expected, (frames, window)

    def test_default_stride_is_half_window(self):
        ws = make_windows(20, 8)
        assert ws.stride == 4 and ws.starts == (0, 4, 8, 12)
        assert not ws.skipped
        assert make_windows(5, 8).skipped

    def test_odd_window_needs_explicit_stride(self):
        with pytest.raises(ScoringError, match="even"):
            make_windows(20, 7)
        assert make_windows(20, 7, stride=3).starts == (0, 3, 6, 9, 12)

    def test_bad_arguments(self):
        with pytest.raises(ScoringError):
            window_starts(10, 1, 1)
        with pytest.raises(ScoringError):
            window_starts(10, 4, 0)


class TestCosine:
    def test_known_values(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)
        assert cosine([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0)
        assert cosine([1.0, 0.0], [-3.0, 0.0]) == pytest.approx(-1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ScoringError, match="zero"):
            cosine([0.0, 0.0], [1.0, 0.0])


class TestPairScore:
    def test_matches_double_loop_reference(self, tmp_path):
        rng = np.random.default_rng(0)
        ids = [f"v{i}" for i in range(8)]
        store = random_store(tmp_path / "f.avfs", ids, 6, rng, frames=(8, 30))
        params = make_params()
        for a, b in [("v0", "v1"), ("v2", "v7"), ("v3", "v3")]:
            za = video_window_embeddings(params, store, a)
            zb = video_window_embeddings(params, store, b)
            got = score_pair(params, store, a, b).score
            want = double_loop_pair_score(za, zb)
            assert got == pytest.approx(want, abs=1e-12)

    def test_symmetry_is_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        store = random_store(tmp_path / "f.avfs", ["a", "b"], 6, rng, frames=(20, 40))
        params = make_params()
        assert score_pair(params, store, "a", "b").score == score_pair(params, store, "b", "a").score

    def test_short_video_is_unscorable(self, tmp_path):
        rng = np.random.default_rng(2)
        short_store = random_store(tmp_path / "g.avfs", ["short"], 6, rng, frames=(3, 3))
        ps = score_pair(make_params(), short_store, "short", "short")
        assert ps.unscorable and ps.score is None
        assert video_window_embeddings(make_params(), short_store, "short") is None

    def test_scores_stay_within_cosine_bounds(self, tmp_path):
        rng = np.random.default_rng(11)
        ids = [f"v{i}" for i in range(10)]
        store = random_store(tmp_path / "f.avfs", ids, 6, rng, frames=(8, 60))
        params = make_params()
        cache = EmbeddingCache()
        for _ in range(60):
            a, b = rng.choice(ids, size=2)
            s = score_pair(params, store, str(a), str(b), cache).score
            assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12

    def test_normalization_travels_with_params(self, tmp_path):
        rng = np.random.default_rng(3)
        store = random_store(tmp_path / "f.avfs", ["a", "b"], 6, rng)
        norm = NormalizationParams(
            mean=np.full(6, 5.0), std=np.full(6, 2.0), floored_dims=(), n_frames=1
        )
        plain = score_pair(make_params(), store, "a", "b").score
        shifted = score_pair(make_params(normalization=norm), store, "a", "b").score
        assert plain != shifted

    def test_cache_avoids_recomputation(self, tmp_path):
        rng = np.random.default_rng(4)
        ids = [f"v{i}" for i in range(6)]
        store = random_store(tmp_path / "f.avfs", ids, 6, rng)
        params = make_params()
        cache = EmbeddingCache()
        for a in ids:
            for b in ids:
                score_pair(params, store, a, b, cache, model_id="m")
        assert cache.computes == len(ids)

    def test_cache_keys_on_model_id(self, tmp_path):
        rng = np.random.default_rng(5)
        store = random_store(tmp_path / "f.avfs", ["a", "b"], 6, rng)
        cache = EmbeddingCache()
        s1 = score_pair(make_params(seed=1), store, "a", "b", cache, model_id="m1").score
        s2 = score_pair(make_params(seed=2), store, "a", "b", cache, model_id="m2").score
        assert cache.computes == 4
        assert s1 != s2


class TestFusion:
    def test_mean_of_models(self):
        scores = [
            PairScore("e", "t", 0.2),
            PairScore("e", "t", 0.6),
        ]
        assert fuse(scores).score == pytest.approx(0.4)

    def test_any_unscorable_poisons_the_trial(self):
        scores = [PairScore("e", "t", 0.2), PairScore("e", "t", None)]
        assert fuse(scores).unscorable

    def test_mixed_trials_rejected(self):
        with pytest.raises(ScoringError, match="different trials"):
            fuse([PairScore("e", "t", 0.2), PairScore("e", "u", 0.3)])
        with pytest.raises(ScoringError):
            fuse([])


class FakeTrial:
    def __init__(self, trial_id, enroll, test, label):
        self.trial_id = trial_id
        self.enroll_video = enroll
        self.test_video = test
        self.label = label


class TestScoreTrials:
    def _setup(self, tmp_path, n=5):
        rng = np.random.default_rng(6)
        ids = [f"v{i}" for i in range(n)]
        store = random_store(tmp_path / "f.avfs", ids, 6, rng)
        return ids, store

    def test_per_model_and_fusion_rows(self, tmp_path):
        ids, store = self._setup(tmp_path)
        trials = [FakeTrial("t1", ids[0], ids[1], 1), FakeTrial("t2", ids[0], ids[2], 0)]
        models = {"m1": (make_params(seed=1), store), "m2": (make_params(seed=2), store)}
        table = score_trials(models, trials)
        assert [r.model for r in table.rows] == ["m1", "m2", "fusion"] * 2
        for i in (0, 3):
            fused = table.rows[i + 2].score
            assert fused == pytest.approx((table.rows[i].score + table.rows[i + 1].score) / 2)
        assert table.missing_videos == [] and table.unscorable_trials == []

    def test_single_model_has_no_fusion_row(self, tmp_path):
        ids, store = self._setup(tmp_path)
        table = score_trials(
            {"m": (make_params(), store)}, [FakeTrial("t1", ids[0], ids[1], 1)]
        )
        assert [r.model for r in table.rows] == ["m"]

    def test_missing_video_skips_trial(self, tmp_path):
        ids, store = self._setup(tmp_path)
        trials = [
            FakeTrial("t1", ids[0], "ghost", 1),
            FakeTrial("t2", ids[0], ids[1], 1),
        ]
        table = score_trials({"m": (make_params(), store)}, trials)
        assert table.missing_videos == ["ghost"]
        assert [r.trial_id for r in table.rows] == ["t2"]

    def test_zscore_fusion_changes_only_fused_rows(self, tmp_path):
        ids, store = self._setup(tmp_path)
        trials = [
            FakeTrial("t1", ids[0], ids[1], 1),
            FakeTrial("t2", ids[0], ids[2], 0),
            FakeTrial("t3", ids[1], ids[3], 0),
        ]
        models = {"m1": (make_params(seed=1), store), "m2": (make_params(seed=2), store)}
        plain = score_trials(models, trials, zscore_fusion=False)
        zed = score_trials(models, trials, zscore_fusion=True)
        for a, b in zip(plain.rows, zed.rows):
            if a.model == "fusion":
                assert a.score != b.score
            else:
                assert a.score == b.score

    def test_round_trip_csv(self, tmp_path):
        ids, store = self._setup(tmp_path)
        trials = [FakeTrial("t1", ids[0], ids[1], 1)]
        table = score_trials({"m": (make_params(), store)}, trials)
        write_score_table(table, tmp_path / "scores.csv")
        back = read_score_table(tmp_path / "scores.csv")
        assert back.rows == table.rows  # repr round trip keeps full precision

    def test_unscorable_round_trips_as_empty_field(self, tmp_path):
        from avatarprint.scoring import ScoreTable

        table = ScoreTable(rows=[ScoreRow("t1", "a", "b", 1, "m", None)])
        write_score_table(table, tmp_path / "scores.csv")
        back = read_score_table(tmp_path / "scores.csv")
        assert back.rows[0].score is None

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("nope\n")
        with pytest.raises(ScoringError, match="bad header"):
            read_score_table(path)
