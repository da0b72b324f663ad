import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from glarisk import ensemble
from glarisk.ensemble import (BaggingConfig, EnsembleModel, ResvmConfig, bagging_penalty_rule, feature_importance,
                              predict, train_bagging, train_cwsvm, train_resvm)
from glarisk.errors import ConfigError
from glarisk.linsvm import LinearModel, SolverConfig


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    P = rng.normal(0.8, 1.0, size=(30, 4))
    U = rng.normal(0.0, 1.0, size=(90, 4))
    return sp.csr_matrix(P), sp.csr_matrix(U)


def _const(w, b):
    return LinearModel(np.asarray(w, float), float(b))


class TestPenaltyRule:
    @pytest.mark.parametrize("n_U,C_U,n_P,want", [(1000, 0.5, 250, 2.0), (100, 1.0, 50, 2.0), (40, 0.3, 40, 0.3)])
    def test_examples(self, n_U, C_U, n_P, want):
        assert bagging_penalty_rule(n_U, C_U, n_P) == pytest.approx(want, rel=1e-15)

    @given(st.integers(1, 5000), st.floats(1e-4, 1e3), st.integers(1, 5000), st.integers(1, 100))
    def test_strictly_decreasing_in_positives(self, n_U, C_U, n_P, extra):
        assert bagging_penalty_rule(n_U, C_U, n_P + extra) < bagging_penalty_rule(n_U, C_U, n_P)

    def test_no_positives(self):
        with pytest.raises(ConfigError):
            bagging_penalty_rule(10, 1.0, 0)


class TestVoting:
    def test_two_of_three(self):
        models = (_const([1.0], 0.0), _const([1.0], 0.0), _const([-1.0], 0.0))
        assert predict(EnsembleModel(models), np.array([[2.0]]))[0] == pytest.approx(2 / 3)

    def test_zero_decision_is_negative_vote(self):
        m = EnsembleModel((_const([1.0], 0.0),))
        assert predict(m, np.array([[0.0]]))[0] == 0.0

    def test_identical_models_give_binary_scores(self):
        m = EnsembleModel((_const([1.0, -1.0], 0.1),) * 5)
        s = predict(m, np.random.default_rng(1).normal(size=(50, 2)))
        assert set(np.unique(s)) <= {0.0, 1.0}

    def test_order_invariant(self):
        rng = np.random.default_rng(2)
        models = [_const(rng.normal(size=3), rng.normal()) for _ in range(7)]
        X = rng.normal(size=(40, 3))
        a = predict(EnsembleModel(tuple(models)), X)
        b = predict(EnsembleModel(tuple(models[::-1])), X)
        np.testing.assert_array_equal(a, b)
        assert set(np.round(a * 7, 9)) <= set(range(8))

    def test_empty_ensemble(self):
        with pytest.raises(ConfigError):
            EnsembleModel(())


class TestBagging:
    def test_single_model_equals_cwsvm_on_its_sample(self, toy):
        P, U = toy
        cfg = BaggingConfig(n_models=1, n_U=U.shape[0], C_U=0.5, seed=3)
        ens = train_bagging(P, U, cfg)
        single = train_cwsvm(P, U, bagging_penalty_rule(U.shape[0], 0.5, P.shape[0]), 0.5)
        X = sp.vstack([P, U])
        np.testing.assert_array_equal(predict(ens, X), (single.decision_values(X) > 0).astype(float))

    def test_full_resample_gives_identical_models(self, toy):
        P, U = toy
        ens = train_bagging(P, U, BaggingConfig(n_models=4, n_U=U.shape[0], C_U=1.0))
        W = ens.weight_matrix()
        assert np.allclose(W, W[0], atol=1e-6)

    def test_same_seed_same_file(self, toy):
        P, U = toy
        cfg = BaggingConfig(n_models=5, n_U=40, C_U=1.0, seed=9)
        assert train_bagging(P, U, cfg).to_json() == train_bagging(P, U, cfg).to_json()

    def test_worker_count_does_not_matter(self, toy):
        P, U = toy
        cfg = BaggingConfig(n_models=6, n_U=40, C_U=1.0, seed=9)
        assert train_bagging(P, U, cfg, workers=1).to_json() == train_bagging(P, U, cfg, workers=3).to_json()

    def test_penalty_recorded(self, toy):
        P, U = toy
        ens = train_bagging(P, U, BaggingConfig(n_models=2, n_U=60, C_U=0.5))
        assert ens.config["C_P"] == pytest.approx(60 * 0.5 / 30)

    def test_n_U_exceeds_unlabeled(self, toy):
        P, U = toy
        with pytest.raises(ConfigError):
            train_bagging(P, U, BaggingConfig(n_U=U.shape[0] + 1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BaggingConfig(n_models=0)
        with pytest.raises(ConfigError):
            ResvmConfig(C_P=-1)


class TestResvm:
    def test_bootstrap_varies_across_models(self, toy):
        P, U = toy
        ens = train_resvm(P, U, ResvmConfig(n_models=3, n_P=P.shape[0], n_U=U.shape[0], seed=1))
        W = ens.weight_matrix()
        assert not np.allclose(W[0], W[1])

    def test_degenerate_resample_reduces_to_cwsvm(self, toy):
        P, U = toy
        cfg = ResvmConfig(n_models=1, n_P=P.shape[0], n_U=U.shape[0], C_P=2.0, C_U=0.5, replace=False)
        ens = train_resvm(P, U, cfg, SolverConfig(tolerance=1e-8))
        single = train_cwsvm(P, U, 2.0, 0.5, SolverConfig(tolerance=1e-8))
        np.testing.assert_allclose(ens.base_models[0].weights, single.weights, atol=1e-5)

    def test_worker_count_does_not_matter(self, toy):
        P, U = toy
        cfg = ResvmConfig(n_models=5, n_P=20, n_U=50, seed=4)
        assert train_resvm(P, U, cfg).to_json() == train_resvm(P, U, cfg, workers=2).to_json()

    def test_empty_sets(self, toy):
        P, _ = toy
        with pytest.raises(ConfigError):
            train_resvm(P, sp.csr_matrix((0, 4)), ResvmConfig())

    def test_json_round_trip(self, toy):
        P, U = toy
        ens = train_resvm(P, U, ResvmConfig(n_models=3, n_P=10, n_U=30))
        back = EnsembleModel.from_json(ens.to_json("h"))
        X = sp.vstack([P, U])
        np.testing.assert_array_equal(predict(back, X), predict(ens, X))
        assert back.kind == "resvm"


class TestImportance:
    def test_identical_models(self):
        w = [0.5, -1.0, 2.0]
        m = EnsembleModel((_const(w, 0),) * 3)
        np.testing.assert_allclose(m.mean_hyperplane()[0], w)

    def test_cancellation(self):
        m = EnsembleModel((_const([1.0, -2.0], 0), _const([-1.0, 2.0], 0)))
        np.testing.assert_array_equal(m.mean_hyperplane()[0], [0.0, 0.0])

    def test_sorted_and_top_k(self):
        m = EnsembleModel((_const([0.1, 3.0, -1.0, 0.5], 0),))
        names = ["age", "gender", "atc1:C", "atc2:C09"]
        full = feature_importance(m, names)
        assert [n for n, _ in full] == ["gender", "atc2:C09", "age", "atc1:C"]
        assert feature_importance(m, names, top_k=2) == full[:2]
        assert feature_importance(m, names, top_k=0) == full

    def test_by_atc_group(self):
        m = EnsembleModel((_const([9.0, 1.0, 2.0, -0.5, 4.0], 0),))
        names = ["age", "atc1:C", "atc5:C09AA05", "atc1:N", "prov_flat:X1"]
        assert feature_importance(m, names, by_atc_group=True) == [("C", 3.0), ("N", -0.5)]

    def test_name_count_mismatch(self):
        with pytest.raises(ConfigError):
            feature_importance(EnsembleModel((_const([1.0], 0),)), ["a", "b"])

    def test_csv(self, tmp_path):
        ensemble.write_importance_csv([("atc1:C", 1.5), ("age", 0.25)], tmp_path / "i.csv")
        assert (tmp_path / "i.csv").read_text().splitlines() == [
            "rank,feature,coefficient,atc_level1_group", "1,atc1:C,1.5,C", "2,age,0.25,"]

    def test_planted_cardiovascular_signal_ranks_high(self, small_data):
        from glarisk.featurize import FeatureBuilder
        ds, _ = small_data
        X, space = FeatureBuilder(ds).build("atc1_5")
        kp = ds.known_positive_mask()
        ens = train_resvm(X[kp], X[~kp], ResvmConfig(n_models=10, n_P=kp.sum(), n_U=200, C_P=1.0, C_U=0.1))
        groups = [g for g, _ in feature_importance(ens, space, by_atc_group=True)]
        assert "C" in groups[:3]
