"""Provision records as patient and physician count matrices.

The (patient, physician, provision) count tensor is reduced to two
marginals: the patient matrix (patients x provisions, summed over
physicians) and the physician matrix (provisions x physicians, summed over
patients).  Provision similarity is the cosine between physician-matrix
rows; the structured patient matrix is ``P_flat @ S_prov``.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import ConfigError, DataError

FILTER_TERMS = ("diabetes", "insulin", "glucose")
DEFAULT_THRESHOLD = 0.05
SCHEMES = ("flat", "struct", "both")


@dataclass(frozen=True, eq=False)
class ProvisionTensor:
    """Coordinate form of the count tensor after filtering."""

    patient_idx: np.ndarray
    physician_idx: np.ndarray
    provision_idx: np.ndarray
    counts: np.ndarray
    n_patients: int
    physician_ids: tuple
    provision_codes: tuple
    n_dropped_filtered: int = 0
    n_dropped_no_physician: int = 0

    @property
    def n_records(self) -> int:
        return int(self.counts.sum())

    def patient_matrix(self) -> sp.csr_matrix:
        m = sp.csr_matrix(
            (self.counts.astype(float), (self.patient_idx, self.provision_idx)),
            shape=(self.n_patients, len(self.provision_codes)),
        )
        m.sum_duplicates()
        return m

    def physician_matrix(self, patient_rows: np.ndarray | None = None) -> sp.csr_matrix:
        """Provisions x physicians, optionally restricted to a subset of patient rows."""
        keep = slice(None)
        if patient_rows is not None:
            mask = np.zeros(self.n_patients, dtype=bool)
            mask[np.asarray(patient_rows)] = True
            keep = mask[self.patient_idx]
        m = sp.csr_matrix(
            (self.counts[keep].astype(float), (self.provision_idx[keep], self.physician_idx[keep])),
            shape=(len(self.provision_codes), len(self.physician_ids)),
        )
        m.sum_duplicates()
        return m


def is_filtered(description: str | None, filter_terms: Sequence[str]) -> bool:
    if not description:
        return False
    text = description.lower()
    return any(t.lower() in text for t in filter_terms)


def _provision_rows(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        df = records
        if "kind" in df:
            df = df[df["kind"] == "provision"]
        return df.loc[:, ["patient_id", "code", "physician_id"]]
    rows = []
    for r in records:
        p = r.payload
        if hasattr(p, "provision_code"):
            rows.append((r.patient_id, p.provision_code, p.physician_id))
    return pd.DataFrame(rows, columns=["patient_id", "code", "physician_id"])


def provision_tensor(records, descriptions: Mapping[str, str] | None = None,
                     filter_terms: Sequence[str] = FILTER_TERMS,
                     patient_ids: Sequence[str] | None = None,
                     provision_codes: Iterable[str] | None = None) -> ProvisionTensor:
    """Filter provision records and tabulate the count tensor.

    The provision vocabulary is ``provision_codes`` (default: every described
    code plus every observed one) minus codes whose description matches a
    filter term; columns follow sorted code order.  Records without a
    physician id are dropped.
    """
    descriptions = dict(descriptions or {})
    df = _provision_rows(records)
    df = df.assign(code=df["code"].astype(str))
    if patient_ids is None:
        patient_ids = sorted(df["patient_id"].astype(str).unique())
    row_of = {p: i for i, p in enumerate(patient_ids)}
    unknown = ~df["patient_id"].isin(row_of)
    if unknown.any():
        raise DataError(f"provision record references unknown patient {df['patient_id'][unknown].iloc[0]}")

    vocab = set(provision_codes) if provision_codes is not None else set(descriptions) | set(df["code"])
    kept = sorted(c for c in vocab if not is_filtered(descriptions.get(c), filter_terms))
    col_of = {c: i for i, c in enumerate(kept)}

    has_phys = df["physician_id"].notna() & (df["physician_id"].astype(str) != "")
    in_vocab = df["code"].isin(col_of)
    n_filtered = int((~in_vocab).sum())
    n_nophys = int((in_vocab & ~has_phys).sum())
    df = df[has_phys & in_vocab]
    phys = sorted(df["physician_id"].astype(str).unique())
    phys_of = {p: i for i, p in enumerate(phys)}

    grouped = (
        df.assign(pi=df["patient_id"].map(row_of), di=df["physician_id"].astype(str).map(phys_of),
                  ci=df["code"].map(col_of))
        .groupby(["pi", "di", "ci"], sort=True).size()
    )
    idx = grouped.index
    return ProvisionTensor(
        patient_idx=np.asarray(idx.get_level_values(0), dtype=np.int64),
        physician_idx=np.asarray(idx.get_level_values(1), dtype=np.int64),
        provision_idx=np.asarray(idx.get_level_values(2), dtype=np.int64),
        counts=grouped.to_numpy(dtype=np.int64),
        n_patients=len(patient_ids),
        physician_ids=tuple(phys),
        provision_codes=tuple(kept),
        n_dropped_filtered=n_filtered,
        n_dropped_no_physician=n_nophys,
    )


def build_tensors(records, filter_terms: Sequence[str] = FILTER_TERMS,
                  descriptions: Mapping[str, str] | None = None,
                  patient_ids: Sequence[str] | None = None):
    """Return (patient matrix, provision-by-physician matrix, kept provision codes)."""
    t = provision_tensor(records, descriptions, filter_terms, patient_ids)
    return t.patient_matrix(), t.physician_matrix(), list(t.provision_codes)


def cosine(u, v) -> float:
    """Cosine similarity; defined as 0 when either vector is zero."""
    u = np.asarray(u.toarray() if sp.issparse(u) else u, dtype=float).ravel()
    v = np.asarray(v.toarray() if sp.issparse(v) else v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ConfigError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def build_similarity(phys_matrix, threshold: float = DEFAULT_THRESHOLD) -> sp.csr_matrix:
    """Cosine similarity between rows of the physician matrix, sparsified below ``threshold``.

    The result is exactly symmetric, rows that are all-zero are all-zero, and
    nonzero rows have a unit diagonal.
    """
    if threshold < 0:
        raise ConfigError(f"threshold must be non-negative, got {threshold}")
    m = sp.csr_matrix(phys_matrix, dtype=float)
    norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
    nonzero = norms > 0
    inv = np.zeros_like(norms)
    inv[nonzero] = 1.0 / norms[nonzero]
    unit = sp.diags(inv) @ m
    s = sp.triu(unit @ unit.T, k=1).tocoo()
    keep = s.data >= threshold
    rows, cols = s.row[keep], s.col[keep]
    vals = np.minimum(s.data[keep], 1.0)
    diag = np.flatnonzero(nonzero)
    n = m.shape[0]
    out = sp.csr_matrix(
        (np.concatenate([vals, vals, np.ones(diag.size)]),
         (np.concatenate([rows, cols, diag]), np.concatenate([cols, rows, diag]))),
        shape=(n, n),
    )
    out.sort_indices()
    return out


def structure(patient_matrix, similarity) -> sp.csr_matrix:
    if patient_matrix.shape[1] != similarity.shape[0] or similarity.shape[0] != similarity.shape[1]:
        raise ConfigError(
            f"cannot multiply patient matrix {patient_matrix.shape} by similarity {similarity.shape}"
        )
    return sp.csr_matrix(sp.csr_matrix(patient_matrix) @ sp.csr_matrix(similarity))


def provision_feature_sets(p_flat, p_struct, scheme: str) -> sp.csr_matrix:
    if scheme == "flat":
        return sp.csr_matrix(p_flat)
    if scheme == "struct":
        return sp.csr_matrix(p_struct)
    if scheme == "both":
        if p_flat.shape != p_struct.shape:
            raise ConfigError("flat and struct blocks must have equal shape")
        return sp.hstack([p_flat, p_struct], format="csr")
    raise ConfigError(f"unknown provision scheme {scheme!r}; choose from {SCHEMES}")


def provision_feature_names(codes: Sequence[str], scheme: str) -> list[str]:
    flat = [f"prov_flat:{c}" for c in codes]
    struct = [f"prov_struct:{c}" for c in codes]
    return {"flat": flat, "struct": struct, "both": flat + struct}[scheme]


def write_similarity_coo(similarity, path) -> None:
    s = sp.coo_matrix(similarity)
    order = np.lexsort((s.col, s.row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "value"])
        for k in order:
            w.writerow([int(s.row[k]), int(s.col[k]), f"{s.data[k]:.6g}"])


def read_descriptions(path) -> dict[str, str]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return out
        if "code" not in reader.fieldnames or "description" not in reader.fieldnames:
            raise DataError(f"{path}: expected columns code,description")
        for lineno, row in enumerate(reader, start=2):
            if row["code"] is None or row["code"] == "":
                raise DataError(f"{path}:{lineno}: empty provision code")
            out[row["code"]] = row["description"] or ""
    return out


def write_descriptions(descriptions: Mapping[str, str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code", "description"])
        for code in sorted(descriptions):
            w.writerow([code, descriptions[code]])
