import math

import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glarisk import provec
from glarisk.errors import ConfigError, DataError


def _records(rows):
    return pd.DataFrame(rows, columns=["patient_id", "code", "physician_id"])


def _brute_similarity(phys, threshold):
    phys = np.asarray(phys, dtype=float)
    n = phys.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ni, nj = math.sqrt(phys[i] @ phys[i]), math.sqrt(phys[j] @ phys[j])
            if ni == 0 or nj == 0:
                continue
            v = phys[i] @ phys[j] / (ni * nj)
            out[i, j] = v if v >= threshold else 0.0
    return out


count_matrices = arrays(np.int64, st.tuples(st.integers(1, 7), st.integers(1, 6)),
                        elements=st.integers(0, 5))


class TestTensors:
    def test_single_cell_marginals(self):
        recs = _records([("p1", "X1", "d1")] * 3)
        P, D, codes = provec.build_tensors(recs)
        assert codes == ["X1"]
        assert P.toarray().tolist() == [[3.0]]
        assert D.toarray().tolist() == [[3.0]]

    def test_missing_physician_contributes_nowhere(self):
        recs = _records([("p1", "X1", "d1"), ("p1", "X1", None), ("p2", "X1", "")])
        t = provec.provision_tensor(recs, patient_ids=["p1", "p2"])
        assert t.patient_matrix().toarray().tolist() == [[1.0], [0.0]]
        assert t.physician_matrix().sum() == 1.0
        assert t.n_dropped_no_physician == 2

    def test_filtered_description_removes_column(self):
        recs = _records([("p1", "X1", "d1"), ("p1", "X2", "d1")])
        desc = {"X1": "Glucose Tolerance Test", "X2": "consultation"}
        P, D, codes = provec.build_tensors(recs, descriptions=desc)
        assert codes == ["X2"]
        assert P.shape == (1, 1) and D.shape == (1, 1)

    @pytest.mark.parametrize("text", ["DIABETES education", "insulin pump", "blood glucose"])
    def test_filter_is_case_insensitive_substring(self, text):
        assert provec.is_filtered(text, provec.FILTER_TERMS)
        assert not provec.is_filtered("cardiology", provec.FILTER_TERMS)

    def test_marginal_consistency(self):
        rng = np.random.default_rng(0)
        rows = [(f"p{rng.integers(5)}", f"X{rng.integers(6)}", f"d{rng.integers(3)}" if rng.random() > 0.2 else None)
                for _ in range(200)]
        recs = _records(rows)
        t = provec.provision_tensor(recs, patient_ids=[f"p{i}" for i in range(5)])
        kept = sum(1 for r in rows if r[2] is not None)
        assert t.patient_matrix().sum() == t.physician_matrix().sum() == kept == t.n_records

    def test_restricted_physician_matrix(self):
        recs = _records([("p1", "X1", "d1"), ("p2", "X1", "d2"), ("p2", "X2", "d2")])
        t = provec.provision_tensor(recs, patient_ids=["p1", "p2"])
        assert t.physician_matrix([0]).toarray().tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_unknown_patient(self):
        with pytest.raises(DataError):
            provec.provision_tensor(_records([("zz", "X1", "d1")]), patient_ids=["p1"])

    def test_vocabulary_fixed_by_codes(self):
        t = provec.provision_tensor(_records([("p1", "X1", "d1")]), patient_ids=["p1"],
                                    provision_codes=["X0", "X1", "X9"])
        assert t.provision_codes == ("X0", "X1", "X9")
        assert t.patient_matrix().toarray().tolist() == [[0.0, 1.0, 0.0]]


class TestCosine:
    def test_identity(self):
        assert provec.cosine([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert provec.cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_hand_value(self):
        assert provec.cosine([1.0, 1.0], [0.0, 1.0]) == pytest.approx(1 / math.sqrt(2))

    def test_zero_vector(self):
        assert provec.cosine([0.0, 0.0], [1.0, 1.0]) == 0.0

    @given(arrays(float, 4, elements=st.floats(0, 10)), arrays(float, 4, elements=st.floats(0, 10)))
    def test_non_negative_inputs_in_unit_interval(self, u, v):
        assert 0.0 <= provec.cosine(u, v) <= 1.0 + 1e-12


class TestSimilarity:
    def test_toy_matches_brute_force(self):
        phys = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 1.0]])
        S = provec.build_similarity(sp.csr_matrix(phys))
        np.testing.assert_allclose(S.toarray(), _brute_similarity(phys, 0.05), atol=1e-12)

    def test_zero_row_is_zero_everywhere(self):
        S = provec.build_similarity(sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]])))
        assert S.toarray().tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_threshold_zeroes_small_entries(self):
        # cosine = 0.04 between these rows
        u = np.array([0.04, math.sqrt(1 - 0.04**2)])
        S = provec.build_similarity(sp.csr_matrix(np.vstack([[1.0, 0.0], u])))
        assert S[0, 1] == 0.0 and S[1, 0] == 0.0
        assert S.nnz == 2

    @settings(max_examples=100, deadline=None)
    @given(count_matrices)
    def test_properties_on_random_matrices(self, phys):
        S = provec.build_similarity(sp.csr_matrix(phys.astype(float)))
        dense = S.toarray()
        assert np.array_equal(dense, dense.T)
        nonzero_rows = phys.sum(axis=1) > 0
        np.testing.assert_array_equal(np.diag(dense), nonzero_rows.astype(float))
        off = dense[~np.eye(dense.shape[0], dtype=bool)]
        assert np.all((off == 0) | (off >= 0.05))
        assert np.all((dense >= 0) & (dense <= 1))
        np.testing.assert_allclose(dense, _brute_similarity(phys, 0.05), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_patient_perturbation_leaves_similarity_unchanged(self, seed):
        rng = np.random.default_rng(seed)
        ids = [f"p{i}" for i in range(6)]
        rows = [(f"p{rng.integers(6)}", f"X{rng.integers(5)}", f"d{rng.integers(4)}") for _ in range(60)]
        t = provec.provision_tensor(_records(rows), patient_ids=ids)
        # reassign every record to a random patient: patient matrix changes, physician marginal does not
        moved = [(f"p{rng.integers(6)}", c, d) for _, c, d in rows]
        t2 = provec.provision_tensor(_records(moved), patient_ids=ids)
        assert t2.patient_matrix().sum() == t.patient_matrix().sum()
        S = provec.build_similarity(t.physician_matrix())
        S2 = provec.build_similarity(t2.physician_matrix())
        assert (S != S2).nnz == 0

    def test_negative_threshold(self):
        with pytest.raises(ConfigError):
            provec.build_similarity(sp.eye(2), -0.1)


class TestStructure:
    def test_identity(self):
        P = sp.csr_matrix(np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 4.0]]))
        assert (provec.structure(P, sp.eye(3)) != P).nnz == 0

    def test_unit_row(self):
        S = sp.csr_matrix(np.array([[1.0, 0.3], [0.3, 1.0]]))
        row = provec.structure(sp.csr_matrix(np.array([[0.0, 2.0]])), S).toarray()
        np.testing.assert_allclose(row, [[0.6, 2.0]])

    def test_empty_row(self):
        S = sp.csr_matrix(np.array([[1.0, 0.3], [0.3, 1.0]]))
        assert provec.structure(sp.csr_matrix((1, 2)), S).nnz == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_naive_product(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.integers(0, 4, size=(4, 5)).astype(float)
        S = rng.random((5, 5)) * (rng.random((5, 5)) < 0.4)
        got = provec.structure(sp.csr_matrix(P), sp.csr_matrix(S)).toarray()
        naive = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                for k in range(5):
                    naive[i, j] += P[i, k] * S[k, j]
        np.testing.assert_allclose(got, naive, atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            provec.structure(sp.csr_matrix((2, 3)), sp.eye(4))


class TestFeatureBlocks:
    def test_both_is_flat_then_struct(self):
        flat = sp.csr_matrix(np.array([[1.0, 0.0]]))
        struct = sp.csr_matrix(np.array([[1.0, 0.5]]))
        both = provec.provision_feature_sets(flat, struct, "both")
        assert both.shape[1] == 2 * flat.shape[1]
        assert both.toarray().tolist() == [[1.0, 0.0, 1.0, 0.5]]
        names = provec.provision_feature_names(["X1", "X2"], "both")
        assert names == ["prov_flat:X1", "prov_flat:X2", "prov_struct:X1", "prov_struct:X2"]

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            provec.provision_feature_sets(sp.eye(1), sp.eye(1), "nested")


class TestIO:
    def test_descriptions_round_trip(self, tmp_path):
        d = {"X2": "consultation, follow-up", "X1": "imaging"}
        provec.write_descriptions(d, tmp_path / "p.csv")
        assert provec.read_descriptions(tmp_path / "p.csv") == d

    def test_descriptions_bad_header(self, tmp_path):
        (tmp_path / "p.csv").write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            provec.read_descriptions(tmp_path / "p.csv")

    def test_similarity_coo(self, tmp_path):
        S = provec.build_similarity(sp.csr_matrix(np.array([[1.0, 1.0], [0.0, 1.0]])))
        provec.write_similarity_coo(S, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "i,j,value"
        assert lines[1:] == ["0,0,1", "0,1,0.707107", "1,0,0.707107", "1,1,1"]
