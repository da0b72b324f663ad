"""Patient feature assembly and percentile scaling.

Vectors are ``[age, gender, medication block, provision block]``; every raw
column is divided by its nearest-rank 99th percentile over the training rows
and clipped at 1.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import atcvec, provec
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

PERCENTILE = 99

# feature set -> (ATC scheme, provision scheme)
FEATURE_SETS: dict[str, tuple[str | None, str | None]] = {
    "age_gender": (None, None),
    "atc5": ("atc5", None),
    "atc1_4": ("atc1_4", None),
    "atc1_5": ("atc1_5", None),
    "provs_flat": (None, "flat"),
    "provs_struct": (None, "struct"),
    "provs_both": (None, "both"),
    "atc_provs": ("atc1_5", "both"),
}


def feature_set_schemes(name: str) -> tuple[str | None, str | None]:
    try:
        return FEATURE_SETS[name]
    except KeyError:
        raise ConfigError(f"unknown feature set {name!r}; choose from {list(FEATURE_SETS)}") from None


def nearest_rank_index(n: int, pct: int = PERCENTILE) -> int:
    """1-based rank ceil(pct * n / 100), in exact integer arithmetic."""
    return -(-pct * n // 100)


def nearest_rank_percentile(values, pct: int = PERCENTILE) -> float:
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ConfigError("percentile of an empty sample")
    return float(v[nearest_rank_index(v.size, pct) - 1])


@dataclass(frozen=True, eq=False)
class FeatureSpace:
    names: tuple
    sources: tuple
    divisors: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.divisors, dtype=float)
        if not (len(self.names) == len(self.sources) == d.shape[0]):
            raise ConfigError("names, sources and divisors must have equal length")
        if not np.all(d > 0):
            raise ConfigError("divisors must be positive")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "divisors", d)

    @property
    def dimension(self) -> int:
        return len(self.names)

    def __eq__(self, other):
        return (isinstance(other, FeatureSpace) and self.names == other.names
                and self.sources == other.sources and np.array_equal(self.divisors, other.divisors))

    def manifest_hash(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "name", "source", "divisor"])
            for i, (n, s, d) in enumerate(zip(self.names, self.sources, self.divisors)):
                w.writerow([i, n, s, repr(float(d))])

    @classmethod
    def from_csv(cls, path) -> "FeatureSpace":
        names, sources, divs = [], [], []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    if int(row["index"]) != len(names):
                        raise ValueError("indices must be consecutive from 0")
                    names.append(row["name"])
                    sources.append(row["source"])
                    divs.append(float(row["divisor"]))
                except (KeyError, ValueError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed manifest row ({exc})") from exc
        return cls(tuple(names), tuple(sources), np.array(divs))


def fit_divisors(raw, pct: int = PERCENTILE) -> np.ndarray:
    """Per-column nearest-rank percentile with max / 1 fallbacks; works on dense or sparse."""
    if raw.shape[0] == 0:
        raise ConfigError("cannot fit scaling on an empty training set")
    n, d = raw.shape
    k = nearest_rank_index(n, pct)
    out = np.ones(d)
    if sp.issparse(raw):
        csc = sp.csc_matrix(raw)
        csc.sort_indices()
        for j in range(d):
            col = csc.data[csc.indptr[j]:csc.indptr[j + 1]]
            zeros = n - col.size
            if col.size == 0:
                continue
            if (col < 0).any():
                # negatives sort before the implicit zeros
                full = np.concatenate([col, np.zeros(zeros)])
                val = np.sort(full)[k - 1]
            else:
                val = 0.0 if k <= zeros else np.sort(col)[k - zeros - 1]
            out[j] = _fallback(val, col.max())
    else:
        a = np.asarray(raw, dtype=float)
        srt = np.sort(a, axis=0)
        for j in range(d):
            out[j] = _fallback(srt[k - 1, j], srt[-1, j])
    return out


def _fallback(val: float, mx: float) -> float:
    if val > 0:
        return float(val)
    if mx > 0:
        return float(mx)
    return 1.0


def fit_scaling(raw, names: Sequence[str], sources: Sequence[str] | None = None,
                pct: int = PERCENTILE) -> FeatureSpace:
    if raw.shape[1] != len(names):
        raise ConfigError(f"{raw.shape[1]} columns but {len(names)} feature names")
    if sources is None:
        sources = [n.split(":", 1)[0] for n in names]
    return FeatureSpace(tuple(names), tuple(sources), fit_divisors(raw, pct))


def transform(raw, space: FeatureSpace):
    """Divide by the fitted divisors and clip at 1; keeps sparse input sparse."""
    if raw.shape[1] != space.dimension:
        raise ConfigError(f"expected {space.dimension} features, got {raw.shape[1]}")
    if sp.issparse(raw):
        m = sp.csr_matrix(raw, dtype=float, copy=True)
        m.data = np.minimum(m.data / space.divisors[m.indices], 1.0)
        return m
    a = np.asarray(raw, dtype=float)
    if a.ndim == 1:
        return np.minimum(a / space.divisors, 1.0)
    return np.minimum(a / space.divisors[None, :], 1.0)


def assemble(age, gender, med_block=None, prov_block=None, med_names: Sequence[str] = (),
             prov_names: Sequence[str] = ()):
    """Stack ``[age, gender | meds | provisions]`` into a raw CSR matrix and manifest.

    Returns (matrix, names, sources).
    """
    age = np.asarray(age, dtype=float).reshape(-1, 1)
    gender = np.asarray(gender, dtype=float).reshape(-1, 1)
    if age.shape != gender.shape:
        raise ConfigError("age and gender must have the same length")
    blocks = [sp.csr_matrix(np.hstack([age, gender]))]
    names = ["age", "gender"]
    sources = ["demographic", "demographic"]
    for block, bnames, source in ((med_block, med_names, "atc"), (prov_block, prov_names, "provision")):
        if block is None:
            continue
        if block.shape[0] != age.shape[0]:
            raise ConfigError(f"{source} block has {block.shape[0]} rows, expected {age.shape[0]}")
        if block.shape[1] != len(bnames):
            raise ConfigError(f"{source} block has {block.shape[1]} columns but {len(bnames)} names")
        blocks.append(sp.csr_matrix(block))
        names.extend(bnames)
        sources.extend([source] * len(bnames))
    if len(set(names)) != len(names):
        raise ConfigError("feature names must be unique")
    return sp.hstack(blocks, format="csr"), names, sources


def write_features_csv(X, ids: Sequence[str], space: FeatureSpace, path) -> None:
    """Dense CSV export (patient_id + one column per feature); for small matrices."""
    dense = X.toarray() if sp.issparse(X) else np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", *space.names])
        for pid, row in zip(ids, dense):
            w.writerow([pid, *(f"{v:.6g}" for v in row)])


class FeatureBuilder:
    """Raw blocks for one dataset, assembled per feature set with fold-local fitting.

    The ATC vocabulary is the dataset's hierarchy table (observed codes when
    absent) minus excluded prefixes; the provision vocabulary is the
    description table (observed codes when absent).  Both are label-free and
    fixed for the dataset, so per-fold matrices share one column layout.
    """

    def __init__(self, dataset, hierarchy=None, filter_terms=provec.FILTER_TERMS,
                 threshold: float = provec.DEFAULT_THRESHOLD, exclude=atcvec.DEFAULT_EXCLUDED,
                 unknown: str = "drop"):
        self.ids = dataset.patient_ids
        self.age = dataset.ages()
        self.gender = (dataset.patients["gender"] == "male").to_numpy(dtype=float)
        self.threshold = threshold
        self.unknown = unknown
        self.exclude = tuple(exclude)
        drugs = dataset.drug_records()
        if hierarchy is None:
            codes = dataset.atc_codes or sorted(drugs["atc"].astype(str).str.upper().unique())
            hierarchy = atcvec.AtcHierarchy(codes)
        self.hierarchy = hierarchy.without_prefixes(self.exclude) if self.exclude else hierarchy
        self._drugs = drugs
        descriptions = dataset.provision_descriptions
        vocab = list(descriptions) if descriptions else None
        self.tensor = provec.provision_tensor(dataset.provision_records(), descriptions, filter_terms,
                                              self.ids, provision_codes=vocab)
        self.p_flat = self.tensor.patient_matrix()
        self._med: dict[str, sp.csr_matrix] = {}

    @property
    def n_patients(self) -> int:
        return len(self.ids)

    def med_block(self, scheme: str) -> sp.csr_matrix:
        if scheme not in self._med:
            m, dropped = atcvec.med_matrix(self._drugs, self.ids, self.hierarchy, scheme,
                                           self.unknown, self.exclude)
            if dropped:
                log.info("%d purchases with codes outside the hierarchy were dropped", dropped)
            self._med[scheme] = m
        return self._med[scheme]

    def similarity(self, fit_rows=None) -> sp.csr_matrix:
        return provec.build_similarity(self.tensor.physician_matrix(fit_rows), self.threshold)

    def raw(self, feature_set: str, fit_rows=None):
        """Unscaled matrix for all patients; S_prov uses only ``fit_rows`` (all when None)."""
        atc_scheme, prov_scheme = feature_set_schemes(feature_set)
        med = names_med = None
        if atc_scheme:
            med = self.med_block(atc_scheme)
            names_med = self.hierarchy.feature_names(atc_scheme)
        prov = names_prov = None
        if prov_scheme:
            struct = None
            if prov_scheme in ("struct", "both"):
                struct = provec.structure(self.p_flat, self.similarity(fit_rows))
            prov = provec.provision_feature_sets(self.p_flat, struct if struct is not None else self.p_flat,
                                                 prov_scheme)
            names_prov = provec.provision_feature_names(self.tensor.provision_codes, prov_scheme)
        return assemble(self.age, self.gender, med, prov, names_med or (), names_prov or ())

    def build(self, feature_set: str, fit_rows=None, global_fit: bool = False):
        """Scaled matrix for all patients plus its FeatureSpace.

        Scaling and S_prov are fitted on ``fit_rows`` unless ``global_fit``.
        """
        rows = None if global_fit else fit_rows
        X, names, sources = self.raw(feature_set, rows)
        fit_part = X if rows is None else X[np.asarray(rows)]
        space = fit_scaling(fit_part, names, sources)
        return transform(X, space), space
