import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from glarisk import pueval
from glarisk.errors import ConfigError
from glarisk.pueval import (Ranking, RocEstimatorConfig, auroc_rank_sum, auroc_trapezoid, estimate_pr,
                            estimate_roc, rank_overfit_test, roc_bounds)
from oracles import brute_auc, exact_u_pvalue


def _ranking(scores, kp, ids=None):
    ids = ids if ids is not None else [f"i{k:04d}" for k in range(len(scores))]
    return Ranking.from_scores(ids, scores, kp)


def _random_ranking(rng, n=60, ties=False):
    kp = rng.random(n) < 0.3
    kp[0], kp[1] = True, False
    scores = rng.integers(0, 8, n).astype(float) if ties else rng.normal(size=n) + kp * rng.uniform(0, 2)
    return _ranking(scores, kp)


rankings = st.builds(lambda seed, ties: _random_ranking(np.random.default_rng(seed), ties=ties),
                     st.integers(0, 2**32 - 1), st.booleans())


class TestRanking:
    def test_ties_broken_by_ascending_id(self):
        r = _ranking([1.0, 2.0, 1.0], [True, False, False], ids=["c", "a", "b"])
        assert r.ids.tolist() == ["a", "b", "c"]

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        scores = rng.integers(0, 4, 30).astype(float)
        kp = rng.random(30) < 0.4
        kp[:2] = [True, False]
        ids = [f"x{i:02d}" for i in range(30)]
        perm = rng.permutation(30)
        a = _ranking(scores, kp, ids)
        b = _ranking(scores[perm], kp[perm], [ids[i] for i in perm])
        assert a.ids.tolist() == b.ids.tolist()
        assert estimate_roc(a)[1] == estimate_roc(b)[1]

    def test_needs_both_groups(self):
        with pytest.raises(ConfigError):
            _ranking([1.0, 2.0], [True, True])

    def test_rejects_nan_and_duplicates(self):
        with pytest.raises(ConfigError):
            _ranking([1.0, float("nan")], [True, False])
        with pytest.raises(ConfigError):
            Ranking.from_scores(["a", "a"], [1.0, 2.0], [True, False])


class TestRocEstimator:
    def test_beta_zero_is_standard_roc(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r = _random_ranking(rng, ties=bool(rng.integers(2)))
            assert estimate_roc(r, 0.0)[1] == pytest.approx(brute_auc(r.scores, r.known_positive), abs=1e-12)

    def test_hand_example(self):
        # order: P U P U U, beta 0.25 and n_U = 3
        r = _ranking([5, 4, 3, 2, 1], [True, False, True, False, False])
        curve, auc = estimate_roc(r, 0.25)
        u_above = np.array([0, 0, 1, 1, 2, 3])
        tpr = np.array([0, 0.5, 0.5, 1, 1, 1])
        fpr = np.maximum.accumulate(np.clip(np.maximum(0, u_above - 0.25 * 3 * tpr) / (0.75 * 3), 0, 1))
        np.testing.assert_allclose(curve, np.column_stack([fpr, tpr]))
        assert auc == pytest.approx(float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2)))

    @settings(max_examples=200, deadline=None)
    @given(rankings, st.floats(0, 0.9))
    def test_curve_is_clean(self, r, beta):
        curve, auc = estimate_roc(r, beta)
        fpr, tpr = curve[:, 0], curve[:, 1]
        assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
        assert np.all((curve >= 0) & (curve <= 1))
        assert 0.0 <= auc <= 1.0

    @settings(max_examples=200, deadline=None)
    @given(rankings, st.floats(0, 0.9))
    def test_fpr_clamp_bounds(self, r, beta):
        p_above, u_above = r.cut_counts()
        fpr = estimate_roc(r, beta)[0][:, 0]
        ceiling = u_above / ((1 - beta) * r.n_U)
        # before the running max each point is below its ceiling; the max keeps it below the running ceiling
        assert np.all(fpr <= np.maximum.accumulate(ceiling) + 1e-12)
        assert np.all(fpr >= 0)

    @settings(max_examples=200, deadline=None)
    @given(rankings)
    def test_auc_non_decreasing_in_beta_for_informative_rankings(self, r):
        p_above, u_above = r.cut_counts()
        # informative: the uncorrected curve never dips below the diagonal
        assume(np.all(u_above / r.n_U <= p_above / r.n_P + 1e-12))
        aucs = [estimate_roc(r, b)[1] for b in np.linspace(0, 0.5, 26)]
        assert all(b >= a - 1e-12 for a, b in zip(aucs, aucs[1:]))
        fprs = [estimate_roc(r, b)[0][:, 0] for b in np.linspace(0, 0.5, 26)]
        assert all(np.all(b <= a + 1e-12) for a, b in zip(fprs, fprs[1:]))

    def test_worse_than_random_ranking_decreases_with_beta(self):
        # all unlabeled first but one: uncorrected AUC below one half
        r = _ranking([4, 3, 2, 1], [False, True, False, True])
        aucs = [estimate_roc(r, b)[1] for b in (0.0, 0.1, 0.2)]
        assert aucs[0] < 0.5 and aucs[2] < aucs[0]

    @pytest.mark.parametrize("beta", [-0.1, 1.0, float("nan")])
    def test_beta_out_of_range(self, beta):
        with pytest.raises(ConfigError):
            RocEstimatorConfig(beta)
        with pytest.raises(ConfigError):
            estimate_roc(_ranking([1, 0], [True, False]), beta)


class TestBounds:
    def test_equal_betas_give_equal_bounds(self):
        r = _random_ranking(np.random.default_rng(3))
        b = roc_bounds(r, 0.07, 0.07)
        assert b.auc_lower == b.auc_upper
        np.testing.assert_array_equal(b.lower_curve, b.upper_curve)

    def test_order_for_informative_ranking(self):
        r = _ranking(np.arange(20, 0, -1), [True] * 5 + [False, True] + [False] * 13)
        b = roc_bounds(r)
        assert b.auc_lower <= b.auc_upper and not b.swapped
        assert b.auc_lower == estimate_roc(r, pueval.BETA_LO)[1]

    def test_interval_stays_ordered_for_bad_ranking(self):
        r = _ranking([4, 3, 2, 1], [False, True, False, True])
        b = roc_bounds(r)
        assert b.auc_lower <= b.auc_upper and b.swapped

    def test_inverted_betas(self):
        with pytest.raises(ConfigError):
            roc_bounds(_ranking([1, 0], [True, False]), 0.1, 0.05)


class TestPrecisionRecall:
    def test_beta_zero_is_standard_pr(self):
        r = _ranking([5, 4, 3, 2, 1], [True, False, True, False, False])
        pr = estimate_pr(r, 0.0)
        np.testing.assert_allclose(pr, [[0.5, 1.0], [0.5, 0.5], [1.0, 2 / 3], [1.0, 0.5], [1.0, 0.4]])

    def test_perfect_ranking(self):
        r = _ranking([5, 4, 3, 2, 1], [True, True, False, False, False])
        pr = estimate_pr(r, 0.0)
        assert pr[pr[:, 0] < 1, 1].tolist() == [1.0]
        assert pr[1, 0] == 1.0 and pr[1, 1] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(rankings, st.floats(0, 0.9))
    def test_bounded(self, r, beta):
        pr = estimate_pr(r, beta)
        assert np.all((pr >= 0) & (pr <= 1))
        assert pr[-1, 0] == 1.0


class TestAuroc:
    def test_symmetric_ranking(self):
        assert auroc_rank_sum([4, 3, 2, 1], [True, False, False, True]) == 0.5

    def test_all_positives_first(self):
        assert auroc_rank_sum([4, 3, 2, 1], [True, True, False, False]) == 1.0
        assert auroc_trapezoid([4, 3, 2, 1], [True, True, False, False]) == 1.0

    def test_random_rankings_agree_with_pairwise_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            scores = rng.integers(0, 10, 50).astype(float) if rng.random() < 0.5 else rng.normal(size=50)
            labels = rng.random(50) < 0.4
            labels[:2] = [True, False]
            want = brute_auc(scores, labels)
            assert abs(auroc_rank_sum(scores, labels) - want) <= 1e-12
            assert abs(auroc_trapezoid(scores, labels) - want) <= 1e-12

    def test_needs_both_classes(self):
        with pytest.raises(ConfigError):
            auroc_rank_sum([1, 2], [True, True])


class TestUTest:
    def test_exact_example(self):
        r = rank_overfit_test([1, 2, 3], [4, 5, 6])
        assert r.method == "exact" and r.U == 9
        assert r.p == pytest.approx(1 / 20, abs=1e-15)

    def test_identical_groups(self):
        r = rank_overfit_test([10, 20, 30, 40, 50, 60, 70], [10, 20, 30, 40, 50, 60, 70])
        assert r.U == 49 / 2 and r.z == 0
        assert r.p == pytest.approx(0.5, abs=1e-9)

    def test_test_above_train(self):
        r = rank_overfit_test([4, 5, 6], [1, 2, 3])
        assert r.U == 0 and r.p == pytest.approx(1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=6, unique=True), st.integers(1, 6))
    def test_exact_matches_oracle(self, values, n1):
        assume(n1 < len(values))
        train, test = values[:n1], values[n1:]
        r = rank_overfit_test(train, test)
        assert r.method == "exact"
        assert r.p == pytest.approx(exact_u_pvalue(train, test), abs=1e-12)

    def test_normal_branch_formula(self):
        rng = np.random.default_rng(5)
        perm = rng.permutation(40) + 1
        a, b = perm[:15], perm[15:]
        r = rank_overfit_test(a, b)
        U = sum((y > x) for x in a for y in b)
        z = (U - 15 * 25 / 2) / math.sqrt(15 * 25 * 41 / 12)
        assert r.method == "normal"
        assert r.z == pytest.approx(z) and r.p == pytest.approx(0.5 * math.erfc(z / math.sqrt(2)))

    def test_ties_use_normal_branch(self):
        assert rank_overfit_test([1, 2, 2], [2, 3]).method == "normal"

    def test_empty_group(self):
        with pytest.raises(ConfigError):
            rank_overfit_test([], [1])


class TestExports:
    def test_full_ranks(self):
        np.testing.assert_array_equal(pueval.full_ranks([0.9, 0.1, 0.9, 0.5]), [1.5, 4, 1.5, 3])

    def test_curve_csv(self, tmp_path):
        r = _ranking([3, 2, 1], [True, False, False])
        pueval.write_curve_csv(estimate_roc(r, 0.0)[0], ("fpr", "tpr"), tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "fpr,tpr" and lines[1] == "0,0" and lines[-1] == "1,1"
        assert all(len(line.split(",")) == 2 for line in lines)

    def test_utest_csv(self, tmp_path):
        pueval.write_utest_csv([(0, rank_overfit_test([1, 2, 3], [4, 5, 6]))], tmp_path / "u.csv")
        assert (tmp_path / "u.csv").read_text().splitlines() == ["fold,U,z,p", "0,9,1.96396,0.05"]
