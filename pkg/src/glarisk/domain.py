"""Patients, expenditure records, cohort labels and datasets.

Records are held column-wise in a :class:`pandas.DataFrame` with the columns
``patient_id, date, kind, atc, ddd, code, physician_id``; the dataclasses
below are the row-level view used for ingestion and iteration.
"""

from __future__ import annotations

import datetime as dt
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from .atcvec import AtcCode
from .errors import ConfigError, DataError

GLA_PREFIX = "A10"

RECORD_COLUMNS = ["patient_id", "date", "kind", "atc", "ddd", "code", "physician_id"]
PATIENT_COLUMNS = ["patient_id", "birth_year", "gender", "enrol_year"]


class Gender(str, Enum):
    MALE = "male"
    FEMALE = "female"


class CohortLabel(str, Enum):
    KNOWN_POSITIVE = "known_positive"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    birth_year: int
    gender: Gender
    enrol_year: int

    def __post_init__(self):
        object.__setattr__(self, "gender", Gender(self.gender))
        if self.enrol_year < self.birth_year:
            raise DataError(
                f"patient {self.patient_id}: enrol_year {self.enrol_year} "
                f"before birth_year {self.birth_year}"
            )

    def age(self, reference_year: int) -> int:
        return reference_year - self.birth_year


@dataclass(frozen=True)
class DrugPurchase:
    atc_code: str
    ddd: float

    def __post_init__(self):
        object.__setattr__(self, "atc_code", str(AtcCode.parse(self.atc_code)))
        if not (self.ddd >= 0 and math.isfinite(self.ddd)):
            raise DataError(f"DDD must be a finite non-negative number, got {self.ddd}")


@dataclass(frozen=True)
class Provision:
    provision_code: str
    physician_id: str | None = None


@dataclass(frozen=True)
class ExpenditureRecord:
    patient_id: str
    date: dt.date
    payload: DrugPurchase | Provision

    @property
    def kind(self) -> str:
        return "drug" if isinstance(self.payload, DrugPurchase) else "provision"


@dataclass(frozen=True)
class Window:
    """Half-open date interval [start, end)."""

    start: dt.date
    end: dt.date

    def __post_init__(self):
        if not self.start < self.end:
            raise ConfigError(f"window start {self.start} must precede end {self.end}")

    def contains(self, day: dt.date) -> bool:
        return self.start <= day < self.end

    def to_dict(self) -> dict:
        return {"start": self.start.isoformat(), "end": self.end.isoformat()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Window":
        return cls(dt.date.fromisoformat(d["start"]), dt.date.fromisoformat(d["end"]))


DEFAULT_OBSERVATION = Window(dt.date(2008, 1, 1), dt.date(2012, 1, 1))
DEFAULT_OUTCOME = Window(dt.date(2012, 1, 1), dt.date(2016, 1, 1))


def patients_frame(patients) -> pd.DataFrame:
    if isinstance(patients, pd.DataFrame):
        df = patients.loc[:, PATIENT_COLUMNS].copy()
    else:
        rows = [(p.patient_id, p.birth_year, Gender(p.gender).value, p.enrol_year) for p in patients]
        df = pd.DataFrame(rows, columns=PATIENT_COLUMNS)
    df["patient_id"] = df["patient_id"].astype(str)
    df["birth_year"] = df["birth_year"].astype(np.int64)
    df["enrol_year"] = df["enrol_year"].astype(np.int64)
    df["gender"] = df["gender"].map(lambda g: Gender(g).value).astype(object)
    return df.reset_index(drop=True)


def records_frame(records) -> pd.DataFrame:
    """Normalize records (iterable of ExpenditureRecord or a frame) to the column layout."""
    if isinstance(records, pd.DataFrame):
        df = records.copy()
        for col in RECORD_COLUMNS:
            if col not in df:
                df[col] = None
        df = df.loc[:, RECORD_COLUMNS]
    else:
        rows = []
        for r in records:
            p = r.payload
            if isinstance(p, DrugPurchase):
                rows.append((r.patient_id, r.date, "drug", p.atc_code, float(p.ddd), None, None))
            else:
                rows.append((r.patient_id, r.date, "provision", None, np.nan, p.provision_code,
                             p.physician_id))
        df = pd.DataFrame(rows, columns=RECORD_COLUMNS)
    df["patient_id"] = df["patient_id"].astype(str)
    df["date"] = pd.to_datetime(df["date"]).astype("datetime64[ns]")
    df["ddd"] = df["ddd"].astype(float)
    for col in ("kind", "atc", "code", "physician_id"):
        df[col] = df[col].astype(object).where(df[col].notna(), None)
    return df.reset_index(drop=True)


def _as_date(x) -> dt.date:
    return pd.Timestamp(x).date()


@dataclass(frozen=True, eq=False)
class Dataset:
    """A labeled cohort with records restricted to the observation window.

    ``atc_codes`` and ``provision_descriptions`` are optional reference tables
    (level-5 codes of the drug hierarchy, provision code -> description).
    """

    patients: pd.DataFrame
    records: pd.DataFrame
    labels: Mapping[str, CohortLabel]
    observation_window: Window
    outcome_window: Window
    reference_year: int
    atc_codes: tuple = ()
    provision_descriptions: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.observation_window.end <= self.outcome_window.start:
            raise ConfigError("observation window must precede the outcome window")
        patients = patients_frame(self.patients)
        records = records_frame(self.records)
        object.__setattr__(self, "patients", patients)
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "labels", {str(k): CohortLabel(v) for k, v in self.labels.items()})
        object.__setattr__(self, "atc_codes", tuple(self.atc_codes))
        object.__setattr__(self, "provision_descriptions", dict(self.provision_descriptions))
        ids = patients["patient_id"]
        if ids.duplicated().any():
            raise DataError(f"duplicate patient id {ids[ids.duplicated()].iloc[0]}")
        known = set(ids)
        unknown = ~records["patient_id"].isin(known)
        if unknown.any():
            raise DataError(f"record references unknown patient {records['patient_id'][unknown].iloc[0]}")
        if set(self.labels) != known:
            missing = known.symmetric_difference(self.labels)
            raise DataError(f"labels and patients disagree on {sorted(missing)[:5]}")
        if len(records):
            lo = pd.Timestamp(self.observation_window.start)
            hi = pd.Timestamp(self.observation_window.end)
            bad = (records["date"] < lo) | (records["date"] >= hi)
            if bad.any():
                raise DataError(
                    f"record of patient {records['patient_id'][bad].iloc[0]} dated "
                    f"{records['date'][bad].iloc[0].date()} lies outside the observation window"
                )

    @property
    def patient_ids(self) -> list[str]:
        return self.patients["patient_id"].tolist()

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    def known_positive_mask(self) -> np.ndarray:
        return np.array([self.labels[p] is CohortLabel.KNOWN_POSITIVE for p in self.patient_ids])

    def ages(self) -> np.ndarray:
        return (self.reference_year - self.patients["birth_year"]).to_numpy(dtype=float)

    def drug_records(self) -> pd.DataFrame:
        return self.records[self.records["kind"] == "drug"]

    def provision_records(self) -> pd.DataFrame:
        return self.records[self.records["kind"] == "provision"]

    def profiles(self) -> list[PatientProfile]:
        return [PatientProfile(*row) for row in self.patients.itertuples(index=False)]

    def iter_records(self):
        for r in self.records.itertuples(index=False):
            if r.kind == "drug":
                payload = DrugPurchase(r.atc, r.ddd)
            else:
                payload = Provision(r.code, r.physician_id)
            yield ExpenditureRecord(r.patient_id, r.date.date(), payload)

    def with_records(self, records: pd.DataFrame) -> "Dataset":
        return Dataset(self.patients, records, self.labels, self.observation_window,
                       self.outcome_window, self.reference_year, self.atc_codes,
                       self.provision_descriptions)

    def equals(self, other: "Dataset") -> bool:
        def canon(df, keys):
            return df.sort_values(keys, kind="stable").reset_index(drop=True)

        keys = ["patient_id", "date", "kind", "atc", "code", "physician_id", "ddd"]
        try:
            pd.testing.assert_frame_equal(self.patients, other.patients)
            pd.testing.assert_frame_equal(canon(self.records.fillna({"atc": "", "code": "", "physician_id": ""}), keys),
                                          canon(other.records.fillna({"atc": "", "code": "", "physician_id": ""}), keys))
        except AssertionError:
            return False
        return (
            self.labels == other.labels
            and self.observation_window == other.observation_window
            and self.outcome_window == other.outcome_window
            and self.reference_year == other.reference_year
            and self.atc_codes == other.atc_codes
            and self.provision_descriptions == other.provision_descriptions
        )


def gla_dates_from_records(records: pd.DataFrame) -> dict[str, list[dt.date]]:
    drugs = records[(records["kind"] == "drug") & records["atc"].fillna("").str.startswith(GLA_PREFIX)]
    out: dict[str, list[dt.date]] = {}
    for pid, day in zip(drugs["patient_id"], drugs["date"]):
        out.setdefault(pid, []).append(day.date())
    return out


def apply_cohort_filters(
    raw_patients,
    raw_records,
    reference_year: int,
    gla_history: Mapping[str, Iterable] | None = None,
    *,
    observation_window: Window = DEFAULT_OBSERVATION,
    outcome_window: Window = DEFAULT_OUTCOME,
    min_age: int = 40,
    min_enrol_lead: int = 7,
    min_gla_span_days: int = 30,
    atc_codes: Iterable[str] = (),
    provision_descriptions: Mapping[str, str] | None = None,
) -> Dataset:
    """Select the study cohort and assign known-positive / unlabeled labels.

    Kept: age (reference_year - birth_year) >= ``min_age``, enrolled at least
    ``min_enrol_lead`` years before ``reference_year`` and no glucose-lowering
    purchase before the outcome window.  A patient whose first such purchase
    falls in the outcome window is a known positive if the purchases span at
    least ``min_gla_span_days`` days and is dropped otherwise.

    GLA dates are the union of ``gla_history`` and A10 purchases in
    ``raw_records``.
    """
    if not observation_window.end <= outcome_window.start:
        raise ConfigError(
            f"observation window {observation_window} must precede outcome window {outcome_window}"
        )
    patients = patients_frame(raw_patients)
    records = records_frame(raw_records)
    known = set(patients["patient_id"])
    unknown = ~records["patient_id"].isin(known)
    if unknown.any():
        raise DataError(f"record references unknown patient {records['patient_id'][unknown].iloc[0]}")

    gla: dict[str, list[dt.date]] = {}
    for pid, days in (gla_history or {}).items():
        gla.setdefault(str(pid), []).extend(_as_date(d) for d in days)
    for pid, days in gla_dates_from_records(records).items():
        gla.setdefault(pid, []).extend(days)

    keep_ids = []
    labels = {}
    for pid, birth, enrol in zip(patients["patient_id"], patients["birth_year"], patients["enrol_year"]):
        if reference_year - birth < min_age or enrol > reference_year - min_enrol_lead:
            continue
        days = gla.get(pid)
        label = CohortLabel.UNLABELED
        if days:
            first, last = min(days), max(days)
            if first < outcome_window.start:
                continue
            if first < outcome_window.end:
                if (last - first).days < min_gla_span_days:
                    continue
                label = CohortLabel.KNOWN_POSITIVE
        keep_ids.append(pid)
        labels[pid] = label

    keep = set(keep_ids)
    patients = patients[patients["patient_id"].isin(keep)]
    lo = pd.Timestamp(observation_window.start)
    hi = pd.Timestamp(observation_window.end)
    records = records[records["patient_id"].isin(keep) & (records["date"] >= lo) & (records["date"] < hi)]
    return Dataset(patients, records, labels, observation_window, outcome_window, reference_year,
                   tuple(atc_codes), dict(provision_descriptions or {}))


def stratified_fold_indices(is_positive: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Split positions into ``k`` folds, dealing each class round-robin after a shuffle."""
    is_positive = np.asarray(is_positive, dtype=bool)
    n_pos = int(is_positive.sum())
    n_unl = int((~is_positive).sum())
    if k < 2:
        raise ConfigError(f"fold count must be >= 2, got {k}")
    if n_pos < k or n_unl < k:
        raise ConfigError(f"{k} folds need at least {k} positives and {k} unlabeled "
                          f"(have {n_pos} and {n_unl})")
    fold_of = np.empty(is_positive.shape[0], dtype=np.int64)
    pos = rng.permutation(np.flatnonzero(is_positive))
    unl = rng.permutation(np.flatnonzero(~is_positive))
    fold_of[pos] = np.arange(n_pos) % k
    # continue dealing where the positives stopped so fold sizes stay balanced
    fold_of[unl] = (np.arange(n_unl) + n_pos) % k
    return [np.sort(np.flatnonzero(fold_of == f)) for f in range(k)]


def split_stratified(dataset: Dataset, k: int, seed: int) -> list[frozenset[str]]:
    ids = np.array(dataset.patient_ids, dtype=object)
    order = np.argsort(ids, kind="stable")
    folds = stratified_fold_indices(dataset.known_positive_mask()[order], k, np.random.default_rng(seed))
    return [frozenset(ids[order][f]) for f in folds]
