"""Nested cross-validated benchmark of the PU learners.

Per outer fold: fit scaling and the provision similarity on the outer-train
rows, tune hyperparameters by PSO against the mean lower-bound AUC over
repeated inner folds, refit on all outer-train rows, then evaluate the
outer-test ranking and the train/test rank-distribution diagnostic.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import ensemble, hyperopt, pueval
from .domain import Dataset, stratified_fold_indices
from .errors import ConfigError, GlaRiskError
from .featurize import FEATURE_SETS, FeatureBuilder, FeatureSpace
from .linsvm import LinearModel, SolverConfig

log = logging.getLogger(__name__)

LEARNERS = ("cwsvm", "bagging", "resvm")

# stage codes for seed derivation
STAGE_OUTER = 1
STAGE_INNER = 2
STAGE_PSO = 3
STAGE_FIT = 4
FINAL_INDEX = 1_000_000

C_RANGE = (1e-3, 1e2)
N_U_RANGE = (50, 2000)
N_P_MIN = 10


def derive_seed(master: int, stage: int, fold: int = 0, index: int = 0) -> int:
    return int(np.random.SeedSequence([master, stage, fold, index]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentPlan:
    feature_sets: tuple = ("age_gender",)
    learners: tuple = ("cwsvm",)
    beta_lo: float = pueval.BETA_LO
    beta_up: float = pueval.BETA_UP
    outer_k: int = 3
    inner_k: int = 10
    inner_iterations: int = 2
    swarm_size: int = 10
    generations: int = 10
    n_models: int = 50
    seed: int = 0
    paper_order: bool = False
    workers: int = 1
    tolerance: float = 1e-4
    max_iterations: int = 10_000
    similarity_threshold: float = 0.05
    # optional fixed hyperparameters per learner; skips the search for that learner
    fixed_params: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "feature_sets", tuple(self.feature_sets))
        object.__setattr__(self, "learners", tuple(self.learners))
        for fs in self.feature_sets:
            if fs not in FEATURE_SETS:
                raise ConfigError(f"unknown feature set {fs!r}; choose from {list(FEATURE_SETS)}")
        for lr in self.learners:
            if lr not in LEARNERS:
                raise ConfigError(f"unknown learner {lr!r}; choose from {LEARNERS}")
        if not self.feature_sets or not self.learners:
            raise ConfigError("plan needs at least one feature set and one learner")
        if self.outer_k < 2 or self.inner_k < 2:
            raise ConfigError("outer_k and inner_k must be >= 2")
        if self.inner_iterations < 1:
            raise ConfigError("inner_iterations must be >= 1")
        if not (0 <= self.beta_lo <= self.beta_up < 1):
            raise ConfigError(f"need 0 <= beta_lo <= beta_up < 1, got {self.beta_lo}, {self.beta_up}")
        if self.swarm_size < 1 or self.generations < 0 or self.n_models < 1 or self.workers < 1:
            raise ConfigError("swarm_size, n_models and workers must be >= 1, generations >= 0")
        SolverConfig(self.tolerance, self.max_iterations)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.tolerance, self.max_iterations)


def _int_param(name, lower, upper) -> hyperopt.Param:
    upper = int(upper)
    if upper < 2:
        raise ConfigError(f"{name}: need at least 2 candidates, upper bound is {upper}")
    lower = int(min(lower, upper - 1))
    return hyperopt.Param(name, max(lower, 1), upper, "linear", "integer")


def default_box(learner: str, n_pos: int, n_unl: int) -> hyperopt.SearchBox:
    """Search ranges; resample sizes are capped by the available training counts."""
    c = lambda name: hyperopt.Param(name, *C_RANGE, "log10", "real")  # noqa: E731
    if learner == "cwsvm":
        return hyperopt.SearchBox((c("C_P"), c("C_U")))
    if learner == "bagging":
        return hyperopt.SearchBox((c("C_U"), _int_param("n_U", N_U_RANGE[0], min(N_U_RANGE[1], n_unl))))
    if learner == "resvm":
        return hyperopt.SearchBox((c("C_P"), c("C_U"), _int_param("n_P", N_P_MIN, n_pos),
                                   _int_param("n_U", N_U_RANGE[0], min(N_U_RANGE[1], n_unl))))
    raise ConfigError(f"unknown learner {learner!r}")


def fit_learner(learner: str, params: Mapping, X_pos, X_unl, n_models: int, seed: int,
                solver: SolverConfig, workers: int = 1):
    if learner == "cwsvm":
        cfg = SolverConfig(solver.tolerance, solver.max_iterations, seed)
        return ensemble.train_cwsvm(X_pos, X_unl, params["C_P"], params["C_U"], cfg)
    if learner == "bagging":
        cfg = ensemble.BaggingConfig(n_models, min(int(params["n_U"]), X_unl.shape[0]), params["C_U"], seed)
        return ensemble.train_bagging(X_pos, X_unl, cfg, solver, workers)
    if learner == "resvm":
        cfg = ensemble.ResvmConfig(n_models, int(params["n_P"]), int(params["n_U"]),
                                   params["C_P"], params["C_U"], seed)
        return ensemble.train_resvm(X_pos, X_unl, cfg, solver, workers)
    raise ConfigError(f"unknown learner {learner!r}")


def score(model, X) -> np.ndarray:
    if isinstance(model, LinearModel):
        return model.decision_values(X)
    return ensemble.predict(model, X)


@dataclass
class FoldResult:
    feature_set: str
    learner: str
    fold: int
    params: dict = field(default_factory=dict)
    inner_objective: float = float("nan")
    auc_lower: float = float("nan")
    auc_upper: float = float("nan")
    beta_lo: float = pueval.BETA_LO
    beta_up: float = pueval.BETA_UP
    utest: pueval.UTestResult | None = None
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)
    test_scores: np.ndarray | None = None
    test_known_positive: np.ndarray | None = None
    lower_curve: np.ndarray | None = None
    upper_curve: np.ndarray | None = None
    trace: list = field(default_factory=list)
    error: str | None = None
    model: object = None
    feature_space: FeatureSpace | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def ranking(self) -> pueval.Ranking:
        return pueval.Ranking.from_scores(self.test_ids, self.test_scores, self.test_known_positive)

    def to_dict(self) -> dict:
        d = {
            "feature_set": self.feature_set,
            "learner": self.learner,
            "fold": self.fold,
            "error": self.error,
            "params": {k: (int(v) if isinstance(v, (int, np.integer)) else float(v))
                       for k, v in sorted(self.params.items())},
            "inner_objective": _num(self.inner_objective),
            "auc_lower": _num(self.auc_lower),
            "auc_upper": _num(self.auc_upper),
            "beta_lo": self.beta_lo,
            "beta_up": self.beta_up,
            "n_train": len(self.train_ids),
            "n_test": len(self.test_ids),
            "train_ids": list(self.train_ids),
        }
        if self.utest is not None:
            u = self.utest
            d["utest"] = {"U": u.U, "z": u.z, "p": u.p, "n1": u.n1, "n2": u.n2, "method": u.method}
        if self.test_scores is not None:
            d["test"] = {
                "patient_id": list(self.test_ids),
                "score": [float(s) for s in self.test_scores],
                "known_positive": [bool(k) for k in self.test_known_positive],
            }
        if self.lower_curve is not None:
            d["lower_curve"] = self.lower_curve.tolist()
            d["upper_curve"] = self.upper_curve.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldResult":
        r = cls(d["feature_set"], d["learner"], int(d["fold"]), dict(d.get("params", {})),
                _unnum(d.get("inner_objective")), _unnum(d.get("auc_lower")), _unnum(d.get("auc_upper")),
                float(d.get("beta_lo", pueval.BETA_LO)), float(d.get("beta_up", pueval.BETA_UP)),
                error=d.get("error"))
        r.train_ids = list(d.get("train_ids", []))
        if "utest" in d:
            u = d["utest"]
            r.utest = pueval.UTestResult(u["U"], u["z"], u["p"], u["n1"], u["n2"], u["method"])
        if "test" in d:
            t = d["test"]
            r.test_ids = list(t["patient_id"])
            r.test_scores = np.asarray(t["score"], dtype=float)
            r.test_known_positive = np.asarray(t["known_positive"], dtype=bool)
        if "lower_curve" in d:
            r.lower_curve = np.asarray(d["lower_curve"], dtype=float)
            r.upper_curve = np.asarray(d["upper_curve"], dtype=float)
        return r

    @classmethod
    def from_json(cls, text: str) -> "FoldResult":
        return cls.from_dict(json.loads(text))


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def _unnum(x):
    return float("nan") if x is None else float(x)


def outer_folds(dataset: Dataset, plan: ExperimentPlan) -> list[np.ndarray]:
    rng = np.random.default_rng(derive_seed(plan.seed, STAGE_OUTER))
    return stratified_fold_indices(dataset.known_positive_mask(), plan.outer_k, rng)


class _FoldContext:
    """Everything one outer fold needs: features, labels, inner splits."""

    def __init__(self, plan: ExperimentPlan, X, is_pos, train_idx, test_idx, fold: int):
        self.plan = plan
        self.X = X
        self.is_pos = is_pos
        self.train_idx = train_idx
        self.test_idx = test_idx
        self.fold = fold
        self.inner = []  # (fit rows, eval rows) as global indices
        local_pos = is_pos[train_idx]
        for it in range(plan.inner_iterations):
            rng = np.random.default_rng(derive_seed(plan.seed, STAGE_INNER, fold, it))
            folds = stratified_fold_indices(local_pos, plan.inner_k, rng)
            for f in folds:
                mask = np.ones(train_idx.size, dtype=bool)
                mask[f] = False
                self.inner.append((train_idx[mask], train_idx[f]))

    def split(self, rows):
        rows = np.asarray(rows)
        pos = rows[self.is_pos[rows]]
        unl = rows[~self.is_pos[rows]]
        return self.X[pos], self.X[unl]

    def box(self, learner: str) -> hyperopt.SearchBox:
        n_pos = min(int(self.is_pos[fit].sum()) for fit, _ in self.inner)
        n_unl = min(int((~self.is_pos[fit]).sum()) for fit, _ in self.inner)
        return default_box(learner, n_pos, n_unl)

    def inner_objective(self, learner: str, params: Mapping) -> float:
        plan = self.plan

        def one(j):
            fit, ev = self.inner[j]
            X_pos, X_unl = self.split(fit)
            model = fit_learner(learner, params, X_pos, X_unl, plan.n_models,
                                derive_seed(plan.seed, STAGE_FIT, self.fold, j), plan.solver)
            ranking = pueval.Ranking.from_scores(ev, score(model, self.X[ev]), self.is_pos[ev])
            return pueval.estimate_roc(ranking, plan.beta_lo)[1]

        jobs = range(len(self.inner))
        if plan.workers > 1:
            with ThreadPoolExecutor(max_workers=plan.workers) as pool:
                aucs = list(pool.map(one, jobs))
        else:
            aucs = [one(j) for j in jobs]
        return float(np.mean(aucs))


def _run_fold(ctx: _FoldContext, learner: str, feature_set: str, ids: np.ndarray,
              space: FeatureSpace | None = None) -> FoldResult:
    plan = ctx.plan
    res = FoldResult(feature_set, learner, ctx.fold, beta_lo=plan.beta_lo, beta_up=plan.beta_up,
                     feature_space=space)
    try:
        if learner in plan.fixed_params:
            params = dict(plan.fixed_params[learner])
            res.inner_objective = float("nan")
        else:
            params, best, trace = hyperopt.optimize(
                lambda p: ctx.inner_objective(learner, p), ctx.box(learner),
                plan.swarm_size, plan.generations, derive_seed(plan.seed, STAGE_PSO, ctx.fold))
            res.inner_objective = best
            res.trace = trace
        res.params = params
        X_pos, X_unl = ctx.split(ctx.train_idx)
        model = fit_learner(learner, params, X_pos, X_unl, plan.n_models,
                            derive_seed(plan.seed, STAGE_FIT, ctx.fold, FINAL_INDEX), plan.solver,
                            plan.workers)
        res.model = model
        all_scores = score(model, ctx.X)
        test = ctx.test_idx
        res.train_ids = ids[ctx.train_idx].tolist()
        res.test_ids = ids[test].tolist()
        res.test_scores = all_scores[test]
        res.test_known_positive = ctx.is_pos[test]
        bounds = pueval.roc_bounds(res.ranking(), plan.beta_lo, plan.beta_up)
        res.auc_lower, res.auc_upper = bounds.auc_lower, bounds.auc_upper
        res.lower_curve, res.upper_curve = bounds.lower_curve, bounds.upper_curve
        # rank the full dataset with this fold's model and compare known positives
        ranks = pueval.full_ranks(all_scores)
        pos_train = ctx.train_idx[ctx.is_pos[ctx.train_idx]]
        pos_test = test[ctx.is_pos[test]]
        res.utest = pueval.rank_overfit_test(ranks[pos_train], ranks[pos_test])
    except (GlaRiskError, ValueError, ArithmeticError) as exc:
        log.error("fold %d of %s/%s failed: %s", ctx.fold, feature_set, learner, exc)
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def fold_features(builder: FeatureBuilder, feature_set: str, train_idx, plan: ExperimentPlan):
    return builder.build(feature_set, fit_rows=train_idx, global_fit=plan.paper_order)


def run_nested_cv(plan: ExperimentPlan, dataset: Dataset, learner: str, feature_set: str,
                  builder: FeatureBuilder | None = None) -> list[FoldResult]:
    builder = builder or FeatureBuilder(dataset, threshold=plan.similarity_threshold)
    return _run_cells(plan, dataset, builder, feature_set, [learner])[learner]


def _run_cells(plan, dataset, builder, feature_set, learners) -> dict[str, list[FoldResult]]:
    is_pos = dataset.known_positive_mask()
    ids = np.asarray(dataset.patient_ids, dtype=object)
    folds = outer_folds(dataset, plan)
    out: dict[str, list[FoldResult]] = {lr: [] for lr in learners}
    for k, test_idx in enumerate(folds):
        train_mask = np.ones(ids.size, dtype=bool)
        train_mask[test_idx] = False
        train_idx = np.flatnonzero(train_mask)
        try:
            X, space = fold_features(builder, feature_set, train_idx, plan)
            ctx = _FoldContext(plan, sp.csr_matrix(X), is_pos, train_idx, test_idx, k)
        except (GlaRiskError, ValueError) as exc:
            for lr in learners:
                out[lr].append(FoldResult(feature_set, lr, k, error=f"{type(exc).__name__}: {exc}"))
            continue
        for lr in learners:
            log.info("fold %d: %s / %s", k, feature_set, lr)
            out[lr].append(_run_fold(ctx, lr, feature_set, ids, space))
    return out


@dataclass
class BenchmarkRow:
    feature_set: str
    learner: str
    auc_lower_mean: float
    auc_upper_mean: float
    utest_p_mean: float
    folds: list

    @property
    def complete(self) -> bool:
        return all(f.ok for f in self.folds)

    @property
    def star(self) -> bool:
        return self.utest_p_mean < 0.005


@dataclass
class BenchmarkReport:
    rows: list
    plan: ExperimentPlan

    @property
    def complete(self) -> bool:
        return all(r.complete for r in self.rows)

    def row(self, feature_set: str, learner: str) -> BenchmarkRow:
        for r in self.rows:
            if r.feature_set == feature_set and r.learner == learner:
                return r
        raise KeyError((feature_set, learner))

    def to_tsv(self) -> str:
        lines = ["\t".join(["feature_set", "learner", "auc_lower", "auc_upper", "utest_p", "p_below_0.005",
                            "folds_ok"])]
        for r in self.rows:
            lines.append("\t".join([
                r.feature_set, r.learner, _fmt(r.auc_lower_mean), _fmt(r.auc_upper_mean),
                _fmt(r.utest_p_mean), "*" if r.star else "",
                f"{sum(f.ok for f in r.folds)}/{len(r.folds)}",
            ]))
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6g}"


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values and all(map(math.isfinite, values)) else float("nan")


def summarize(feature_set: str, learner: str, folds: list[FoldResult]) -> BenchmarkRow:
    ok = all(f.ok for f in folds)
    lo = _mean([f.auc_lower for f in folds]) if ok else float("nan")
    up = _mean([f.auc_upper for f in folds]) if ok else float("nan")
    p = _mean([f.utest.p for f in folds]) if ok else float("nan")
    return BenchmarkRow(feature_set, learner, lo, up, p, folds)


def run_benchmark(plan: ExperimentPlan, dataset: Dataset, builder: FeatureBuilder | None = None) -> BenchmarkReport:
    builder = builder or FeatureBuilder(dataset, threshold=plan.similarity_threshold)
    rows = []
    for fs in plan.feature_sets:
        cells = _run_cells(plan, dataset, builder, fs, list(plan.learners))
        for lr in plan.learners:
            rows.append(summarize(fs, lr, cells[lr]))
    return BenchmarkReport(rows, plan)


def oracle_evaluate(fold_results: Sequence[FoldResult], ground_truth) -> list[dict]:
    """True-label AUC per fold next to the estimated bounds; needs ground truth."""
    if ground_truth is None:
        raise ConfigError("no ground truth available for oracle evaluation")
    outcomes = getattr(ground_truth, "outcomes", ground_truth)
    out = []
    for f in fold_results:
        if not f.ok:
            continue
        truth = np.array([outcomes[p] for p in f.test_ids], dtype=bool)
        curve, auc = pueval.true_roc(f.test_scores, truth)
        out.append({
            "feature_set": f.feature_set, "learner": f.learner, "fold": f.fold,
            "true_auc": auc, "auc_lower": f.auc_lower, "auc_upper": f.auc_upper,
            "bracketed": f.auc_lower - 0.02 <= auc <= f.auc_upper + 0.02,
            "true_curve": curve,
        })
    return out


def with_workers(plan: ExperimentPlan, workers: int) -> ExperimentPlan:
    return replace(plan, workers=workers)
