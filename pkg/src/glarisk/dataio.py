"""Dataset directories: CSV / JSON-lines readers and writers.

Layout::

    patients.csv        patient_id,birth_year,gender,enrol_year
    records.jsonl       {patient_id, date, kind, atc, ddd, code, physician_id}
    labels.csv          patient_id,label
    dataset.json        windows and reference year
    atc_hierarchy.csv   code            (optional)
    provisions.csv      code,description (optional)

``ground_truth.csv`` is written next to these by the generator but is only
ever read by :func:`read_ground_truth`.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from pathlib import Path

import pandas as pd

from .domain import (PATIENT_COLUMNS, RECORD_COLUMNS, CohortLabel, Dataset, Gender, Window,
                     records_frame)
from .errors import DataError
from .provec import read_descriptions, write_descriptions

FORMAT_VERSION = 1

PATIENTS = "patients.csv"
RECORDS = "records.jsonl"
LABELS = "labels.csv"
META = "dataset.json"
HIERARCHY = "atc_hierarchy.csv"
DESCRIPTIONS = "provisions.csv"
GROUND_TRUTH = "ground_truth.csv"


def read_patients_csv(path) -> pd.DataFrame:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PATIENT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}:1: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((row["patient_id"], int(row["birth_year"]), Gender(row["gender"]).value,
                             int(row["enrol_year"])))
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed patient row ({exc})") from exc
            if not row["patient_id"]:
                raise DataError(f"{path}:{lineno}: empty patient_id")
    return pd.DataFrame(rows, columns=PATIENT_COLUMNS)


def write_patients_csv(patients: pd.DataFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PATIENT_COLUMNS)
        for r in patients.itertuples(index=False):
            w.writerow([r.patient_id, int(r.birth_year), r.gender, int(r.enrol_year)])


def _parse_record(obj: dict) -> tuple:
    kind = obj.get("kind")
    pid = obj.get("patient_id")
    if pid is None or pid == "":
        raise ValueError("missing patient_id")
    day = dt.date.fromisoformat(str(obj["date"]))
    if kind == "drug":
        atc = obj.get("atc")
        ddd = float(obj.get("ddd"))
        if not isinstance(atc, str) or not atc:
            raise ValueError("drug record without atc")
        if not (ddd >= 0 and math.isfinite(ddd)):
            raise ValueError(f"invalid ddd {obj.get('ddd')!r}")
        return (str(pid), day, "drug", atc, ddd, None, None)
    if kind == "provision":
        code = obj.get("code")
        if code is None or code == "":
            raise ValueError("provision record without code")
        phys = obj.get("physician_id")
        return (str(pid), day, "provision", None, float("nan"), str(code),
                None if phys in (None, "") else str(phys))
    raise ValueError(f"unknown kind {kind!r}")


def read_records_jsonl(path) -> pd.DataFrame:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                rows.append(_parse_record(obj))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records_frame(pd.DataFrame(rows, columns=RECORD_COLUMNS))


def write_records_jsonl(records: pd.DataFrame, path) -> None:
    with open(path, "w") as fh:
        for r in records.itertuples(index=False):
            obj = {"patient_id": r.patient_id, "date": r.date.date().isoformat(), "kind": r.kind}
            if r.kind == "drug":
                obj.update(atc=r.atc, ddd=float(r.ddd))
            else:
                obj.update(code=r.code, physician_id=r.physician_id)
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_labels_csv(path) -> dict[str, CohortLabel]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["patient_id"]] = CohortLabel(row["label"])
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed label row ({exc})") from exc
    return out


def write_labels_csv(ids, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "label"])
        for pid in ids:
            w.writerow([pid, labels[pid].value])


def write_dataset(dataset: Dataset, directory) -> Path:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {d}: {exc}") from exc
    write_patients_csv(dataset.patients, d / PATIENTS)
    write_records_jsonl(dataset.records, d / RECORDS)
    write_labels_csv(dataset.patient_ids, dataset.labels, d / LABELS)
    meta = {
        "format_version": FORMAT_VERSION,
        "reference_year": dataset.reference_year,
        "observation_window": dataset.observation_window.to_dict(),
        "outcome_window": dataset.outcome_window.to_dict(),
    }
    (d / META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if dataset.atc_codes:
        with open(d / HIERARCHY, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["code"])
            for c in dataset.atc_codes:
                w.writerow([c])
    if dataset.provision_descriptions:
        write_descriptions(dataset.provision_descriptions, d / DESCRIPTIONS)
    return d


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    if not (d / META).is_file():
        raise DataError(f"{d} is not a dataset directory (no {META})")
    try:
        meta = json.loads((d / META).read_text())
        obs = Window.from_dict(meta["observation_window"])
        out = Window.from_dict(meta["outcome_window"])
        ref = int(meta["reference_year"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{d / META}: malformed metadata ({exc})") from exc
    atc_codes: tuple = ()
    if (d / HIERARCHY).is_file():
        with open(d / HIERARCHY, newline="") as fh:
            atc_codes = tuple(row["code"] for row in csv.DictReader(fh))
    descriptions = read_descriptions(d / DESCRIPTIONS) if (d / DESCRIPTIONS).is_file() else {}
    return Dataset(
        read_patients_csv(d / PATIENTS),
        read_records_jsonl(d / RECORDS),
        read_labels_csv(d / LABELS),
        obs, out, ref, atc_codes, descriptions,
    )


def write_ground_truth(truth: dict[str, int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "true_outcome"])
        for pid in sorted(truth):
            w.writerow([pid, int(truth[pid])])


def read_ground_truth_csv(path) -> dict[str, int]:
    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                v = int(row["true_outcome"])
                if v not in (0, 1):
                    raise ValueError(f"outcome {v} not in {{0,1}}")
                out[row["patient_id"]] = v
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed ground-truth row ({exc})") from exc
    return out
