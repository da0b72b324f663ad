"""Bagging SVM and RESVM ensembles of class-weighted linear SVMs.

Both train ``n_models`` base models on resampled training sets and score an
instance by the fraction of base models voting positive (decision value
strictly above 0).  Bagging keeps every positive and subsamples the unlabeled
set without replacement; RESVM bootstraps both sets.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linsvm
from .errors import ConfigError
from .linsvm import LinearModel, SolverConfig, TrainingSet


def bagging_penalty_rule(n_U: int, C_U: float, n_positives: int) -> float:
    """C_P = n_U * C_U / |P|."""
    if n_positives <= 0:
        raise ConfigError(f"need at least one positive, got {n_positives}")
    return n_U * C_U / n_positives


@dataclass(frozen=True)
class BaggingConfig:
    n_models: int = 50
    n_U: int = 500
    C_U: float = 1.0
    seed: int = 0
    replace: bool = False

    def __post_init__(self):
        if self.n_models < 1:
            raise ConfigError(f"n_models must be >= 1, got {self.n_models}")
        if self.n_U < 1:
            raise ConfigError(f"n_U must be >= 1, got {self.n_U}")
        if not self.C_U > 0:
            raise ConfigError(f"C_U must be > 0, got {self.C_U}")


@dataclass(frozen=True)
class ResvmConfig:
    n_models: int = 50
    n_P: int = 100
    n_U: int = 500
    C_P: float = 1.0
    C_U: float = 1.0
    seed: int = 0
    replace: bool = True

    def __post_init__(self):
        if self.n_models < 1:
            raise ConfigError(f"n_models must be >= 1, got {self.n_models}")
        if self.n_P < 1 or self.n_U < 1:
            raise ConfigError(f"resample sizes must be >= 1, got n_P={self.n_P}, n_U={self.n_U}")
        if not (self.C_P > 0 and self.C_U > 0):
            raise ConfigError("penalties must be > 0")


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    base_models: tuple
    kind: str = "bagging"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_models:
            raise ConfigError("an ensemble needs at least one base model")
        object.__setattr__(self, "base_models", tuple(self.base_models))

    @property
    def n_models(self) -> int:
        return len(self.base_models)

    def weight_matrix(self) -> np.ndarray:
        return np.vstack([m.weights for m in self.base_models])

    def biases(self) -> np.ndarray:
        return np.array([m.bias for m in self.base_models])

    def votes(self, X) -> np.ndarray:
        """Number of base models with decision value > 0, per instance."""
        dv = X @ self.weight_matrix().T
        dv = np.asarray(dv) + self.biases()[None, :]
        return (dv > 0).sum(axis=1)

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    def mean_hyperplane(self) -> tuple[np.ndarray, float]:
        return self.weight_matrix().mean(axis=0), float(self.biases().mean())

    def to_dict(self, manifest_hash: str | None = None) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "manifest_hash": manifest_hash,
            "base_models": [m.to_dict(manifest_hash) for m in self.base_models],
        }

    def to_json(self, manifest_hash: str | None = None) -> str:
        return json.dumps(self.to_dict(manifest_hash), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleModel":
        return cls(tuple(LinearModel.from_dict(m) for m in d["base_models"]), d.get("kind", "bagging"),
                   dict(d.get("config", {})))

    @classmethod
    def from_json(cls, text: str) -> "EnsembleModel":
        return cls.from_dict(json.loads(text))


def predict(ensemble: EnsembleModel, instances) -> np.ndarray:
    """Fraction of positive votes, in {0, 1/n, ..., 1}."""
    X = instances if sp.issparse(instances) else np.atleast_2d(np.asarray(instances, dtype=float))
    return ensemble.votes(X) / ensemble.n_models


def model_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """One independent stream per base model, derived from (seed, index)."""
    return [np.random.SeedSequence([seed, i]) for i in range(n)]


def _fit_one(positives, unlabeled, seq, n_P, n_U, replace_P, replace_U, C_P, C_U, solver):
    rng = np.random.default_rng(seq)
    if n_P is None:
        pi = np.arange(positives.shape[0])
    else:
        pi = np.sort(rng.choice(positives.shape[0], size=n_P, replace=replace_P))
    ui = np.sort(rng.choice(unlabeled.shape[0], size=n_U, replace=replace_U))
    X = sp.vstack([positives[pi], unlabeled[ui]], format="csr")
    y = np.concatenate([np.ones(pi.size), -np.ones(ui.size)])
    solver_seed = int(seq.generate_state(1)[0])
    cfg = SolverConfig(solver.tolerance, solver.max_iterations, solver_seed)
    return linsvm.train(TrainingSet(X, y, C_P, C_U), cfg)


def _fit_all(jobs, workers: int):
    if workers <= 1 or len(jobs) == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


def _as_csr(m) -> sp.csr_matrix:
    return m if sp.isspmatrix_csr(m) else sp.csr_matrix(m, dtype=float)


def train_bagging(positives, unlabeled, config: BaggingConfig, solver_config: SolverConfig | None = None,
                  workers: int = 1) -> EnsembleModel:
    positives, unlabeled = _as_csr(positives), _as_csr(unlabeled)
    if positives.shape[0] < 1:
        raise ConfigError("no positives to train on")
    if not config.replace and config.n_U > unlabeled.shape[0]:
        raise ConfigError(f"n_U={config.n_U} exceeds the {unlabeled.shape[0]} unlabeled instances")
    solver = solver_config or SolverConfig()
    C_P = bagging_penalty_rule(config.n_U, config.C_U, positives.shape[0])
    jobs = [
        (lambda s=s: _fit_one(positives, unlabeled, s, None, config.n_U, False, config.replace,
                              C_P, config.C_U, solver))
        for s in model_seeds(config.seed, config.n_models)
    ]
    models = _fit_all(jobs, workers)
    cfg = asdict(config) | {"C_P": C_P}
    return EnsembleModel(tuple(models), "bagging", cfg)


def train_resvm(positives, unlabeled, config: ResvmConfig, solver_config: SolverConfig | None = None,
                workers: int = 1) -> EnsembleModel:
    positives, unlabeled = _as_csr(positives), _as_csr(unlabeled)
    if positives.shape[0] < 1 or unlabeled.shape[0] < 1:
        raise ConfigError("RESVM needs at least one positive and one unlabeled instance")
    if not config.replace and (config.n_P > positives.shape[0] or config.n_U > unlabeled.shape[0]):
        raise ConfigError("resample sizes exceed the available instances without replacement")
    solver = solver_config or SolverConfig()
    jobs = [
        (lambda s=s: _fit_one(positives, unlabeled, s, config.n_P, config.n_U, config.replace,
                              config.replace, config.C_P, config.C_U, solver))
        for s in model_seeds(config.seed, config.n_models)
    ]
    return EnsembleModel(tuple(_fit_all(jobs, workers)), "resvm", asdict(config))


def train_cwsvm(positives, unlabeled, C_P: float, C_U: float, solver_config: SolverConfig | None = None) -> LinearModel:
    positives, unlabeled = _as_csr(positives), _as_csr(unlabeled)
    X = sp.vstack([positives, unlabeled], format="csr")
    y = np.concatenate([np.ones(positives.shape[0]), -np.ones(unlabeled.shape[0])])
    return linsvm.train(TrainingSet(X, y, C_P, C_U), solver_config)


def atc_level1_group(name: str) -> str:
    """Level-1 letter for ATC feature names (``atcK:CODE``), empty otherwise."""
    if name.startswith("atc") and ":" in name:
        return name.split(":", 1)[1][:1]
    return ""


def feature_importance(ensemble: EnsembleModel | LinearModel, feature_names: Sequence[str] | object,
                       top_k: int = 0, by_atc_group: bool = False) -> list[tuple[str, float]]:
    """Coefficients of the mean base-model hyperplane, sorted descending.

    With ``by_atc_group`` the ATC coefficients are summed per level-1 group and
    only the groups are returned.  ``top_k=0`` returns the full list.
    """
    names = list(getattr(feature_names, "names", feature_names))
    if isinstance(ensemble, LinearModel):
        w = ensemble.weights
    else:
        w = ensemble.mean_hyperplane()[0]
    if len(names) != w.shape[0]:
        raise ConfigError(f"{len(names)} feature names for a {w.shape[0]}-dimensional model")
    if by_atc_group:
        sums: dict[str, float] = {}
        for n, c in zip(names, w):
            g = atc_level1_group(n)
            if g:
                sums[g] = sums.get(g, 0.0) + float(c)
        items = list(sums.items())
    else:
        items = [(n, float(c)) for n, c in zip(names, w)]
    # stable on name for equal coefficients
    items.sort(key=lambda t: (-t[1], t[0]))
    if top_k < 0:
        raise ConfigError("top_k must be >= 0")
    return items[:top_k] if top_k else items


def write_importance_csv(items: Sequence[tuple[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "feature", "coefficient", "atc_level1_group"])
        for rank, (name, coef) in enumerate(items, start=1):
            group = name if len(name) == 1 and name.isalpha() else atc_level1_group(name)
            w.writerow([rank, name, f"{coef:.6g}", group])
