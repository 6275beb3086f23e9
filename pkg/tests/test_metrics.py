import numpy as np
import pytest
from helpers import central_difference, relative_error
from hypothesis import given, settings
from hypothesis import strategies as st

from fewseq import alignment
from fewseq.errors import DataError, NumericError
from fewseq.metrics import (
    MetricKind,
    bi_mhm_score,
    brute_force_otam,
    cost_matrix,
    episode_scores,
    episode_scores_backward,
    mean_cosine_score,
    otam_score,
    otam_score_with_grad,
)


def random_cost(rng, tq, ts):
    return rng.uniform(0.0, 2.0, size=(tq, ts))


class TestCostMatrix:
    def test_self_distance_zero_diagonal(self):
        fq = np.eye(4)[:3]  # orthonormal rows
        d = cost_matrix(fq, fq)
        np.testing.assert_allclose(np.diag(d), 0.0, atol=1e-15)

    def test_orthogonal_rows_cost_one(self):
        fq = np.array([[1.0, 0.0]])
        fs = np.array([[0.0, 1.0]])
        assert cost_matrix(fq, fs)[0, 0] == pytest.approx(1.0)

    def test_antipodal_cost_two(self):
        fq = np.array([[1.0, 2.0]])
        assert cost_matrix(fq, -fq)[0, 0] == pytest.approx(2.0)

    def test_zero_row_rejected(self):
        with pytest.raises(NumericError, match="zero-norm"):
            cost_matrix(np.zeros((2, 3)), np.ones((2, 3)))

    def test_range(self):
        rng = np.random.default_rng(0)
        d = cost_matrix(rng.standard_normal((5, 8)), rng.standard_normal((6, 8)))
        assert (d >= 0).all() and (d <= 2).all()


class TestOtamScore:
    def test_single_cell_unidirectional(self):
        # the only path walks through the one interior cell
        c = np.array([[0.7]])
        assert brute_force_otam(c, bidirectional=False) == pytest.approx(-0.7)
        assert otam_score(c, 0.0, bidirectional=False) == pytest.approx(-0.7)

    def test_single_cell_bidirectional(self):
        c = np.array([[0.5]])
        assert brute_force_otam(c, bidirectional=True) == pytest.approx(-1.0)
        assert otam_score(c, 0.0, bidirectional=True) == pytest.approx(-1.0)

    def test_zero_matrix(self):
        c = np.zeros((4, 6))
        assert brute_force_otam(c) == 0.0
        assert otam_score(c, 0.0) == 0.0

    def test_diagonal_path(self):
        c = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert brute_force_otam(c, bidirectional=False) == pytest.approx(0.0)
        assert otam_score(c, 0.0, bidirectional=False) == pytest.approx(0.0)

    @pytest.mark.parametrize("bidirectional", [False, True])
    def test_oracle_equivalence(self, bidirectional):
        rng = np.random.default_rng(123)
        for _ in range(200):
            tq = int(rng.integers(1, 7))
            ts = int(rng.integers(1, 7))
            c = random_cost(rng, tq, ts)
            dp = otam_score(c, 0.0, bidirectional)
            bf = brute_force_otam(c, bidirectional)
            assert abs(dp - bf) <= 1e-12

    def test_soft_hard_convergence(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            c = random_cost(rng, int(rng.integers(1, 7)), int(rng.integers(1, 7)))
            hard = otam_score(c, 0.0)
            soft = otam_score(c, 1e-4)
            assert abs(soft - hard) <= 1e-3
            # soft-min never exceeds the hard min, so the similarity only grows
            assert soft >= hard - 1e-12

    def test_brute_force_size_guard(self):
        with pytest.raises(DataError, match="size-exceeded"):
            brute_force_otam(np.zeros((8, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for bidirectional in (False, True):
            c = random_cost(rng, 4, 5)
            _, grad = otam_score_with_grad(c, 0.1, bidirectional)
            fd = central_difference(
                lambda m: otam_score(m, 0.1, bidirectional), c.copy()
            )
            assert relative_error(grad, fd) <= 1e-4

    def test_identity_ordering(self):
        rng = np.random.default_rng(21)
        fq = rng.standard_normal((5, 8))
        self_score = otam_score(cost_matrix(fq, fq), 0.0)
        for _ in range(20):
            fs = rng.standard_normal((5, 8))
            assert self_score >= otam_score(cost_matrix(fq, fs), 0.0)

    def test_negative_smoothing_rejected(self):
        with pytest.raises(DataError):
            otam_score(np.zeros((2, 2)), -0.1)


class TestBiMhm:
    def test_zero_matrix(self):
        assert bi_mhm_score(np.zeros((3, 4))) == 0.0

    def test_permutation_matrix(self):
        assert bi_mhm_score(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.uniform(0, 2, size=(4, 6))
        base = bi_mhm_score(c)
        assert bi_mhm_score(c[:, rng.permutation(6)]) == pytest.approx(base)
        assert bi_mhm_score(c[rng.permutation(4), :]) == pytest.approx(base)


class TestMeanCosine:
    def test_self(self):
        rng = np.random.default_rng(3)
        fq = rng.standard_normal((4, 6))
        assert mean_cosine_score(fq, fq) == pytest.approx(1.0)

    def test_orthogonal_pools(self):
        fq = np.array([[1.0, 0.0], [1.0, 0.0]])
        fs = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert mean_cosine_score(fq, fs) == pytest.approx(0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        fq = rng.standard_normal((4, 6))
        fs = rng.standard_normal((3, 6))
        assert mean_cosine_score(fq, 3.0 * fs) == pytest.approx(mean_cosine_score(fq, fs), abs=1e-12)


class TestBackends:
    def test_numpy_available_regardless_of_flag(self):
        assert alignment.backend_name() in ("numba", "numpy")

    @pytest.mark.parametrize("smoothing", [0.0, 0.1, 1.0])
    def test_numba_matches_numpy(self, smoothing):
        pytest.importorskip("numba")
        from fewseq import _alignment_numba

        rng = np.random.default_rng(17)
        costs = rng.uniform(0, 2, size=(12, 5, 7))
        t_np, cum_np = alignment.otam_forward_numpy(costs, smoothing)
        t_nb, cum_nb = _alignment_numba.otam_forward(costs, smoothing)
        np.testing.assert_allclose(t_nb, t_np, rtol=0, atol=1e-12)
        np.testing.assert_allclose(cum_nb, cum_np, rtol=0, atol=1e-12)
        g = rng.standard_normal(12)
        g_np = alignment.otam_backward_numpy(costs, cum_np, smoothing, g)
        g_nb = _alignment_numba.otam_backward(costs, cum_nb, smoothing, g)
        np.testing.assert_allclose(g_nb, g_np, rtol=0, atol=1e-12)


class TestEpisodeScores:
    @pytest.fixture
    def features(self):
        rng = np.random.default_rng(8)
        fq = rng.standard_normal((3, 4, 6))
        fs = rng.standard_normal((2, 5, 6))
        return fq, fs

    def test_matches_single_pair_otam(self, features):
        fq, fs = features
        metric = MetricKind("otam", smoothing=0.0, bidirectional=True)
        scores, _ = episode_scores(fq, fs, metric)
        for q in range(3):
            for n in range(2):
                expected = otam_score(cost_matrix(fq[q], fs[n]), 0.0, True)
                assert scores[q, n] == pytest.approx(expected, abs=1e-12)

    def test_matches_single_pair_bi_mhm(self, features):
        fq, fs = features
        scores, _ = episode_scores(fq, fs, MetricKind("bi_mhm"))
        for q in range(3):
            for n in range(2):
                expected = bi_mhm_score(cost_matrix(fq[q], fs[n]))
                assert scores[q, n] == pytest.approx(expected, abs=1e-12)

    def test_matches_single_pair_mean_cosine(self, features):
        fq, fs = features
        scores, _ = episode_scores(fq, fs, MetricKind("mean_cosine"))
        for q in range(3):
            for n in range(2):
                expected = mean_cosine_score(fq[q], fs[n])
                assert scores[q, n] == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize(
        "metric",
        [
            MetricKind("otam", smoothing=0.1, bidirectional=True),
            MetricKind("otam", smoothing=0.1, bidirectional=False),
            MetricKind("bi_mhm"),
            MetricKind("mean_cosine"),
        ],
    )
    def test_backward_matches_finite_differences(self, metric):
        rng = np.random.default_rng(9)
        fq = rng.standard_normal((2, 3, 5))
        fs = rng.standard_normal((2, 3, 5))
        w = rng.standard_normal((2, 2))  # random linear functional of the scores

        def objective_fq(x):
            s, _ = episode_scores(x, fs, metric)
            return float((w * s).sum())

        def objective_fs(x):
            s, _ = episode_scores(fq, x, metric)
            return float((w * s).sum())

        scores, cache = episode_scores(fq, fs, metric)
        dfq, dfs = episode_scores_backward(cache, w)
        assert relative_error(dfq, central_difference(objective_fq, fq.copy())) <= 1e-4
        assert relative_error(dfs, central_difference(objective_fs, fs.copy())) <= 1e-4
