"""Evaluation from positive and unlabeled test sets.

The ROC estimator treats the known positives' rank distribution as a
stand-in for the latent positives hidden among the unlabeled: at a cut with
true-positive rate ``tpr`` an expected ``beta * n_U * tpr`` of the unlabeled
above the cut are positives, and the rest count as false positives.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ConfigError

BETA_LO = 0.05
BETA_UP = 0.10
TIE_POLICY = "instance_id"
EXACT_LIMIT = 12


@dataclass(frozen=True, eq=False)
class Ranking:
    """Instances sorted by descending score; equal scores by ascending instance id."""

    ids: np.ndarray
    scores: np.ndarray
    known_positive: np.ndarray
    tie_policy: str = TIE_POLICY

    @classmethod
    def from_scores(cls, ids, scores, known_positive) -> "Ranking":
        ids = np.asarray(ids, dtype=object)
        scores = np.asarray(scores, dtype=float)
        kp = np.asarray(known_positive, dtype=bool)
        if not (ids.shape == scores.shape == kp.shape):
            raise ConfigError("ids, scores and labels must have the same length")
        if np.isnan(scores).any():
            raise ConfigError("scores contain NaN")
        if len(set(ids.tolist())) != ids.size:
            raise ConfigError("instance ids must be unique")
        # two stable passes: ids ascending, then scores descending
        by_id = np.argsort(ids.astype(str), kind="stable")
        order = by_id[np.argsort(-scores[by_id], kind="stable")]
        r = cls(ids[order], scores[order], kp[order])
        if r.n_P < 1 or r.n_U < 1:
            raise ConfigError(f"ranking needs >= 1 known positive and >= 1 unlabeled "
                              f"(got {r.n_P} and {r.n_U})")
        return r

    @property
    def n_P(self) -> int:
        return int(self.known_positive.sum())

    @property
    def n_U(self) -> int:
        return int((~self.known_positive).sum())

    def cut_counts(self):
        """Cumulative (known positive, unlabeled) counts at each distinct-score boundary."""
        last = np.r_[np.flatnonzero(np.diff(self.scores) != 0), self.scores.size - 1]
        p = np.cumsum(self.known_positive)[last]
        u = (last + 1) - p
        return np.r_[0, p], np.r_[0, u]


@dataclass(frozen=True)
class RocEstimatorConfig:
    beta_hat: float = BETA_LO

    def __post_init__(self):
        _check_beta(self.beta_hat)


def _check_beta(beta) -> float:
    if not (0.0 <= beta < 1.0) or math.isnan(beta):
        raise ConfigError(f"beta_hat must lie in [0, 1), got {beta}")
    return float(beta)


def _beta_of(config) -> float:
    return _check_beta(config.beta_hat if isinstance(config, RocEstimatorConfig) else float(config))


def trapezoid(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) * 0.5))


def estimate_roc(ranking: Ranking, config: RocEstimatorConfig | float = BETA_LO):
    """(curve, auc) where curve is an (m, 2) array of (fpr, tpr) from (0, 0) to (1, 1)."""
    beta = _beta_of(config)
    p_above, u_above = ranking.cut_counts()
    n_p, n_u = ranking.n_P, ranking.n_U
    tpr = p_above / n_p
    fpr = np.maximum(0.0, u_above - beta * n_u * tpr) / ((1.0 - beta) * n_u)
    fpr[-1] = 1.0  # exact at the last cut; avoids 1 - eps from rounding
    fpr = np.maximum.accumulate(np.clip(fpr, 0.0, 1.0))
    curve = np.column_stack([fpr, tpr])
    return curve, trapezoid(fpr, tpr)


@dataclass(frozen=True, eq=False)
class RocBounds:
    lower_curve: np.ndarray
    upper_curve: np.ndarray
    auc_lower: float
    auc_upper: float
    beta_lo: float
    beta_up: float
    swapped: bool = False


def roc_bounds(ranking: Ranking, beta_lo: float = BETA_LO, beta_up: float = BETA_UP) -> RocBounds:
    _check_beta(beta_lo)
    _check_beta(beta_up)
    if beta_lo > beta_up:
        raise ConfigError(f"beta_lo={beta_lo} exceeds beta_up={beta_up}")
    lo, auc_lo = estimate_roc(ranking, beta_lo)
    up, auc_up = estimate_roc(ranking, beta_up)
    # the estimate falls with beta for worse-than-random rankings; keep the interval ordered
    if auc_lo > auc_up:
        return RocBounds(up, lo, auc_up, auc_lo, beta_lo, beta_up, swapped=True)
    return RocBounds(lo, up, auc_lo, auc_up, beta_lo, beta_up)


def estimate_pr(ranking: Ranking, config: RocEstimatorConfig | float = BETA_LO) -> np.ndarray:
    """(m, 2) array of (recall, precision) at each distinct-score cut."""
    beta = _beta_of(config)
    p_above, u_above = ranking.cut_counts()
    p_above, u_above = p_above[1:], u_above[1:]
    recall = p_above / ranking.n_P
    precision = np.minimum((p_above + beta * ranking.n_U * recall) / (p_above + u_above), 1.0)
    return np.column_stack([recall, precision])


def true_roc(scores, truth):
    """Standard ROC (ties form diagonal segments) and its area from binary labels."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    ids = np.arange(scores.size)
    r = Ranking.from_scores(ids, scores, truth)
    return estimate_roc(r, 0.0)


def auroc_rank_sum(scores, labels) -> float:
    """Mann-Whitney form of the AUROC with midranks for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUROC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auroc_trapezoid(scores, labels) -> float:
    return true_roc(scores, labels)[1]


def auroc_rank_equivalence(ranking: Ranking) -> float:
    """AUROC of a fully labeled ranking (``known_positive`` = true class) via rank sums."""
    return auroc_rank_sum(ranking.scores, ranking.known_positive)


@dataclass(frozen=True)
class UTestResult:
    U: float
    z: float
    p: float
    n1: int
    n2: int
    method: str


def _exact_p(train: np.ndarray, test: np.ndarray, u_obs: float) -> float:
    pooled = np.concatenate([train, test])
    n, n1 = pooled.size, train.size
    hits = total = 0
    for combo in itertools.combinations(range(n), n1):
        mask = np.zeros(n, dtype=bool)
        mask[list(combo)] = True
        total += 1
        if _u_stat(pooled[mask], pooled[~mask]) >= u_obs - 1e-9:
            hits += 1
    return hits / total


def _u_stat(train: np.ndarray, test: np.ndarray) -> float:
    diff = test[None, :] - train[:, None]
    return float((diff > 0).sum() + 0.5 * (diff == 0).sum())


def rank_overfit_test(train_ranks: Sequence[float], test_ranks: Sequence[float]) -> UTestResult:
    """One-sided Mann-Whitney U: are test-positive ranks larger (worse) than training ones?

    Exact permutation p-value for untied samples with n1 + n2 <= 12, normal
    approximation without continuity correction otherwise.
    """
    a = np.asarray(train_ranks, dtype=float).ravel()
    b = np.asarray(test_ranks, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ConfigError("both rank groups must be non-empty")
    n1, n2 = a.size, b.size
    U = _u_stat(a, b)
    mean = n1 * n2 / 2.0
    sd = math.sqrt(n1 * n2 * (n1 + n2 + 1) / 12.0)
    z = (U - mean) / sd
    pooled = np.concatenate([a, b])
    if n1 + n2 <= EXACT_LIMIT and np.unique(pooled).size == pooled.size:
        return UTestResult(U, z, _exact_p(a, b, U), n1, n2, "exact")
    return UTestResult(U, z, float(norm.sf(z)), n1, n2, "normal")


def full_ranks(scores) -> np.ndarray:
    """1 = best; equal scores share their average rank."""
    return rankdata(-np.asarray(scores, dtype=float))


def write_curve_csv(curve: np.ndarray, header: tuple[str, str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in curve:
            w.writerow([f"{x:.6g}", f"{y:.6g}"])


def write_utest_csv(rows: Sequence[tuple[int, UTestResult]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "U", "z", "p"])
        for fold, r in rows:
            w.writerow([fold, f"{r.U:.6g}", f"{r.z:.6g}", f"{r.p:.6g}"])
