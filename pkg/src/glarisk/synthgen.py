"""Seeded synthetic claims with a planted logistic risk model.

Every cohort patient gets latent standardized propensities: one per ATC
main group and one per provision cluster.  The true outcome is drawn from a
logistic model over age, gender and the propensities named in
``risk_coefficients``.  Purchase and provision counts are Poisson with rates
that grow with the matching propensity, so the observed records carry the
signal.

A random ``labeled_fraction`` of true positives receive a sustained GLA
history in the outcome window and so become known positives.  True
negatives flipped to known positive supply contamination.  A few distractor
patients are generated so that each cohort filter is exercised, and they are
removed by :func:`apply_cohort_filters`.
"""

from __future__ import annotations

import datetime as dt
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from . import dataio
from .atcvec import AtcHierarchy, synthetic_hierarchy
from .domain import (DEFAULT_OBSERVATION, DEFAULT_OUTCOME, RECORD_COLUMNS, CohortLabel, Dataset,
                     Window, apply_cohort_filters)
from .errors import ConfigError, GenerationError

log = logging.getLogger(__name__)

DEFAULT_RISK = {"age": 0.8, "gender": 0.15, "C": 2.0, "B": 0.8, "H": 0.5, "provisions": 1.0}
DEFAULT_LEVEL_COUNTS = (14, 60, 150, 400, 1200)
GLA_CODES = ("A10BA02", "A10BB01", "A10BH01")
MIN_ENROL_LEAD = 7


_GENERIC_TERMS = ("consultation", "imaging", "laboratory panel", "physiotherapy", "home visit",
                  "surgery", "screening", "dental care", "vaccination", "echography", "biopsy",
                  "nursing care", "follow-up", "emergency care", "endoscopy")
_FILTERED_TERMS = ("glucose tolerance test", "insulin pump follow-up", "diabetes education",
                   "blood glucose monitoring", "diabetes foot care")


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 10_000
    true_positive_fraction: float = 0.08
    labeled_fraction: float = 0.5
    false_positive_rate: float = 0.0
    risk_coefficients: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_RISK))
    hierarchy: AtcHierarchy | None = None
    n_provisions: int = 200
    n_physicians: int = 100
    n_provision_clusters: int = 8
    seed: int = 0
    catalog_seed: int = 0
    mean_purchases: float = 40.0
    mean_provisions: float = 30.0
    distractor_fraction: float = 0.05
    # log-rate slope of record counts in the latent propensities
    signal_slope: float = 1.0
    observation_window: Window = DEFAULT_OBSERVATION
    outcome_window: Window = DEFAULT_OUTCOME
    reference_year: int = 2012

    def __post_init__(self):
        if self.n_patients < 10:
            raise ConfigError(f"n_patients must be >= 10, got {self.n_patients}")
        if not 0 < self.true_positive_fraction < 1:
            raise ConfigError("true_positive_fraction must lie in (0, 1)")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if not 0 <= self.false_positive_rate < 1:
            raise ConfigError("false_positive_rate must lie in [0, 1)")
        if self.n_provisions < 1 or self.n_physicians < 1:
            raise ConfigError("n_provisions and n_physicians must be >= 1")
        if not 1 <= self.n_provision_clusters <= min(self.n_provisions, self.n_physicians):
            raise ConfigError("n_provision_clusters must be between 1 and min(n_provisions, n_physicians)")
        if self.distractor_fraction < 0 or self.mean_purchases < 0 or self.mean_provisions < 0:
            raise ConfigError("rates and distractor_fraction must be non-negative")
        if not self.observation_window.end <= self.outcome_window.start:
            raise ConfigError("observation window must precede the outcome window")
        object.__setattr__(self, "risk_coefficients", dict(self.risk_coefficients))


@dataclass(frozen=True)
class GroundTruth:
    outcomes: Mapping[str, int]
    true_beta: float

    def positives(self) -> set[str]:
        return {p for p, y in self.outcomes.items() if y}


def _resolve_hierarchy(config: GeneratorConfig) -> AtcHierarchy:
    h = config.hierarchy or synthetic_hierarchy(DEFAULT_LEVEL_COUNTS, seed=config.catalog_seed)
    missing = [c for c in GLA_CODES if c not in h]
    if missing:
        h = AtcHierarchy(h.leaves + tuple(missing))
    return h


def _rate_factor(z, slope: float):
    """exp(slope * z) normalized to mean 1 over the standard normal z."""
    return np.exp(slope * z - 0.5 * slope**2)


def _zipf_weights(n: int, rng, a: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return rng.permutation(w / w.sum())


def _provision_catalog(config: GeneratorConfig, rng):
    n = config.n_provisions
    codes = [f"PR{i:05d}" for i in range(n)]
    n_filtered = max(1, round(0.03 * n)) if n > 1 else 0
    filtered = set(rng.choice(n, size=n_filtered, replace=False).tolist())
    descriptions = {}
    for i, code in enumerate(codes):
        if i in filtered:
            descriptions[code] = _FILTERED_TERMS[i % len(_FILTERED_TERMS)]
        else:
            descriptions[code] = f"{_GENERIC_TERMS[i % len(_GENERIC_TERMS)]} {i}"
    ordinary = np.array(sorted(set(range(n)) - filtered), dtype=np.int64)
    filtered_idx = np.array(sorted(filtered), dtype=np.int64)
    k = config.n_provision_clusters
    prov_cluster = np.full(n, -1)
    prov_cluster[ordinary] = rng.permutation(np.arange(ordinary.size) % k)
    phys_cluster = rng.permutation(np.arange(config.n_physicians) % k)
    return codes, descriptions, ordinary, filtered_idx, prov_cluster, phys_cluster


def _random_days(rng, window: Window, size: int) -> np.ndarray:
    span = (window.end - window.start).days
    base = np.datetime64(window.start.isoformat(), "D")
    return base + rng.integers(0, span, size=size).astype("timedelta64[D]")


def _drug_records(rng, ids, z_groups, groups, hierarchy, config, window):
    leaves_by_group = {g: [c for c in hierarchy.leaves if c[0] == g and not c.startswith("A10")]
                       for g in groups}
    base = _zipf_weights(len(groups), rng, a=0.5) * config.mean_purchases
    if "C" in groups:
        base[groups.index("C")] = max(base[groups.index("C")], 0.2 * config.mean_purchases)
    pid_parts, code_parts, n_total = [], [], 0
    for gi, g in enumerate(groups):
        leaves = leaves_by_group[g]
        if not leaves:
            continue
        popularity = _zipf_weights(len(leaves), rng)
        counts = rng.poisson(base[gi] * _rate_factor(z_groups[:, gi], config.signal_slope))
        total = int(counts.sum())
        if total == 0:
            continue
        owner = np.repeat(np.arange(len(ids)), counts)
        # each patient mostly refills one preferred substance per group
        favourite = rng.choice(len(leaves), size=len(ids), p=popularity)
        other = rng.choice(len(leaves), size=total, p=popularity)
        pick = np.where(rng.random(total) < 0.7, favourite[owner], other)
        pid_parts.append(owner)
        code_parts.append(np.asarray(leaves, dtype=object)[pick])
        n_total += total
    if not n_total:
        return pd.DataFrame(columns=RECORD_COLUMNS)
    owner = np.concatenate(pid_parts)
    codes = np.concatenate(code_parts)
    ddd = np.round(rng.gamma(4.0, 8.0, size=owner.size), 1)
    return pd.DataFrame({
        "patient_id": np.asarray(ids, dtype=object)[owner],
        "date": _random_days(rng, window, owner.size),
        "kind": "drug", "atc": codes, "ddd": ddd, "code": None, "physician_id": None,
    })


def _provision_records(rng, ids, z_clusters, y, catalog, config, window):
    codes, _, ordinary, filtered_idx, prov_cluster, phys_cluster = catalog
    k = config.n_provision_clusters
    rate = _zipf_weights(k, rng, a=0.5) * config.mean_provisions
    # the signal cluster is a common one
    rate[0] = max(rate[0], 1.5 * config.mean_provisions / k)
    counts = rng.poisson(rate[None, :] * _rate_factor(z_clusters, config.signal_slope))
    owner = np.repeat(np.repeat(np.arange(len(ids)), k), counts.ravel())
    cluster = np.repeat(np.tile(np.arange(k), len(ids)), counts.ravel())
    total = owner.size
    members = [np.flatnonzero(prov_cluster == c) for c in range(k)]
    docs = [np.flatnonzero(phys_cluster == c) for c in range(k)]
    pop = [_zipf_weights(m.size, rng) for m in members]
    prov = np.empty(total, dtype=np.int64)
    phys = np.empty(total, dtype=np.int64)
    for c in range(k):
        sel = np.flatnonzero(cluster == c)
        prov[sel] = members[c][rng.choice(members[c].size, size=sel.size, p=pop[c])]
        phys[sel] = docs[c][rng.integers(0, docs[c].size, size=sel.size)]
    # cross-specialty noise
    stray = rng.random(total) < 0.15
    prov[stray] = ordinary[rng.integers(0, ordinary.size, size=int(stray.sum()))]
    stray = rng.random(total) < 0.15
    phys[stray] = rng.integers(0, config.n_physicians, size=int(stray.sum()))
    # diabetes-related provisions, more frequent among true positives (removed by the filter)
    if filtered_idx.size:
        extra = rng.poisson(np.where(y == 1, 2.0, 0.3))
        f_owner = np.repeat(np.arange(len(ids)), extra)
        owner = np.concatenate([owner, f_owner])
        prov = np.concatenate([prov, filtered_idx[rng.integers(0, filtered_idx.size, size=f_owner.size)]])
        phys = np.concatenate([phys, rng.integers(0, config.n_physicians, size=f_owner.size)])
    phys_ids = np.array([f"DR{j:04d}" for j in range(config.n_physicians)], dtype=object)[phys]
    phys_ids[rng.random(owner.size) < 0.03] = None
    return pd.DataFrame({
        "patient_id": np.asarray(ids, dtype=object)[owner],
        "date": _random_days(rng, window, owner.size),
        "kind": "provision", "atc": None, "ddd": np.nan,
        "code": np.asarray(codes, dtype=object)[prov], "physician_id": phys_ids,
    })


def _gla_schedule(rng, window: Window, n: int, long: bool = True) -> list[list[dt.date]]:
    out = []
    last_start = (window.end - window.start).days - 61
    for _ in range(n):
        first = window.start + dt.timedelta(days=int(rng.integers(0, max(last_start, 1))))
        span = int(rng.integers(30, 366)) if long else int(rng.integers(0, 30))
        k = int(rng.integers(2, 7))
        offs = sorted({0, span, *rng.integers(0, span + 1, size=k - 2).tolist()})
        out.append([first + dt.timedelta(days=o) for o in offs])
    return out


def generate(config: GeneratorConfig) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    hierarchy = _resolve_hierarchy(config)
    groups = sorted(hierarchy.nodes[1])
    coef = config.risk_coefficients
    unknown = set(coef) - {"age", "gender", "provisions"} - set(groups)
    if unknown:
        raise ConfigError(f"risk coefficients refer to groups absent from the hierarchy: {sorted(unknown)}")
    catalog = _provision_catalog(config, np.random.default_rng([config.catalog_seed, 0xCA7]))
    n = config.n_patients
    ref = config.reference_year

    age = np.minimum(40 + rng.gamma(3.0, 7.0, size=n).astype(np.int64), 100)
    male = rng.random(n) < 0.5
    z_groups = rng.standard_normal((n, len(groups)))
    z_clusters = rng.standard_normal((n, config.n_provision_clusters))
    age_std = (age - age.mean()) / (age.std() or 1.0)

    score = coef.get("age", 0.0) * age_std + coef.get("gender", 0.0) * (male - 0.5) * 2
    for g, w in coef.items():
        if g in groups:
            score = score + w * z_groups[:, groups.index(g)]
    # provision signal lives in cluster 0
    score = score + coef.get("provisions", 0.0) * z_clusters[:, 0]

    target = config.true_positive_fraction
    intercept = brentq(lambda b: expit(score + b).mean() - target, -50, 50)
    y = (rng.random(n) < expit(score + intercept)).astype(np.int64)
    positives = np.flatnonzero(y == 1)
    negatives = np.flatnonzero(y == 0)
    n_lab = int(round(config.labeled_fraction * positives.size))
    if positives.size == 0 or n_lab == 0:
        raise GenerationError(
            f"target true_positive_fraction={target} x labeled_fraction={config.labeled_fraction} "
            f"realized {positives.size} positives and {n_lab} known positives at n_patients={n}"
        )
    n_fp = int(round(n_lab * config.false_positive_rate / (1 - config.false_positive_rate)))
    if n_fp > negatives.size - 1:
        raise GenerationError(f"false_positive_rate={config.false_positive_rate} needs {n_fp} "
                              f"contaminating negatives but only {negatives.size} exist")
    labeled = np.sort(rng.choice(positives, size=n_lab, replace=False))
    # contamination draws use their own stream so the rest of the dataset does not depend on the rate
    fp_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF9]))
    contaminated = np.sort(fp_rng.choice(negatives, size=n_fp, replace=False)) if n_fp else np.array([], int)
    if n - n_lab - n_fp < 1:
        raise GenerationError("no unlabeled patients remain")

    # distractors: one violated filter each
    n_dis = int(round(config.distractor_fraction * n))
    kinds = np.arange(n_dis) % 4  # 0 young, 1 late enrolment, 2 prevalent GLA, 3 short GLA span
    total = n + n_dis
    order = rng.permutation(total)
    ids = np.array([f"P{i:07d}" for i in range(total)], dtype=object)[order]
    core_ids, dis_ids = ids[:n], ids[n:]

    dis_age = np.where(kinds == 0, rng.integers(25, 40, size=n_dis), 40 + rng.gamma(3.0, 7.0, size=n_dis).astype(np.int64))
    all_age = np.concatenate([age, dis_age])
    enrol_lead = rng.integers(MIN_ENROL_LEAD, 40, size=total)
    enrol_lead[n:][kinds == 1] = rng.integers(0, MIN_ENROL_LEAD, size=int((kinds == 1).sum()))
    birth = ref - all_age
    enrol = np.maximum(ref - enrol_lead, birth)
    patients = pd.DataFrame({
        "patient_id": ids,
        "birth_year": birth,
        "gender": np.where(np.concatenate([male, rng.random(n_dis) < 0.5]), "male", "female"),
        "enrol_year": enrol,
    })

    obs, out = config.observation_window, config.outcome_window
    z_dis_g = rng.standard_normal((n_dis, len(groups)))
    z_dis_c = rng.standard_normal((n_dis, config.n_provision_clusters))
    all_z_g = np.vstack([z_groups, z_dis_g])
    all_z_c = np.vstack([z_clusters, z_dis_c])
    all_y = np.concatenate([y, np.zeros(n_dis, dtype=np.int64)])
    drugs = _drug_records(rng, ids, all_z_g, groups, hierarchy, config, obs)
    provs = _provision_records(rng, ids, all_z_c, all_y, catalog, config, obs)

    gla_history: dict[str, list[dt.date]] = {}
    for pid, days in zip(core_ids[labeled], _gla_schedule(rng, out, labeled.size)):
        gla_history[pid] = days
    for pid, days in zip(core_ids[contaminated], _gla_schedule(fp_rng, out, contaminated.size)):
        gla_history[pid] = days
    prevalent = dis_ids[kinds == 2]
    gla_drugs = pd.DataFrame({
        "patient_id": prevalent,
        "date": _random_days(rng, obs, prevalent.size),
        "kind": "drug", "atc": np.asarray(GLA_CODES, dtype=object)[rng.integers(0, len(GLA_CODES), prevalent.size)],
        "ddd": np.round(rng.gamma(4.0, 8.0, size=prevalent.size), 1), "code": None, "physician_id": None,
    })
    short = dis_ids[kinds == 3]
    for pid, days in zip(short, _gla_schedule(rng, out, short.size, long=False)):
        gla_history[pid] = days

    records = pd.concat([drugs, gla_drugs, provs], ignore_index=True)
    records = records.sort_values(["patient_id", "date", "kind"], kind="stable").reset_index(drop=True)
    dataset = apply_cohort_filters(
        patients, records, ref, gla_history,
        observation_window=obs, outcome_window=out,
        atc_codes=hierarchy.leaves, provision_descriptions=catalog[1],
    )
    if dataset.n_patients != n:
        raise GenerationError(f"cohort filters kept {dataset.n_patients} patients, expected {n}")

    truth = {pid: int(v) for pid, v in zip(core_ids, y)}
    unl = [p for p in dataset.patient_ids if dataset.labels[p] is CohortLabel.UNLABELED]
    beta = sum(truth[p] for p in unl) / len(unl)
    log.info("generated %d patients: %d known positive (%d contaminated), true beta %.4f",
             n, n_lab + n_fp, n_fp, beta)
    return dataset, GroundTruth(truth, beta)


def export(dataset: Dataset, ground_truth: GroundTruth | None, directory) -> Path:
    d = dataio.write_dataset(dataset, directory)
    if ground_truth is not None:
        dataio.write_ground_truth(ground_truth.outcomes, d / dataio.GROUND_TRUTH)
    return d


def load_ground_truth(directory, dataset: Dataset | None = None) -> GroundTruth | None:
    """Read ``ground_truth.csv`` if present; true_beta is recomputed from the labels when given."""
    path = Path(directory) / dataio.GROUND_TRUTH
    if not path.is_file():
        return None
    outcomes = dataio.read_ground_truth_csv(path)
    beta = float("nan")
    if dataset is not None:
        unl = [p for p in dataset.patient_ids if dataset.labels[p] is CohortLabel.UNLABELED]
        if unl:
            beta = sum(outcomes.get(p, 0) for p in unl) / len(unl)
    return GroundTruth(outcomes, beta)
