"""Class-weighted soft-margin linear SVM.

Solves

    min_{w,b}  1/2 ||w||^2 + C_P sum_{i in P} xi_i + C_U sum_{i in U} xi_i,
    xi_i = max(0, 1 - y_i (<w, x_i> + b))

with an unregularized bias.  For a fixed bias the dual is a box-constrained
QP handled by dual coordinate descent; the bias is the root of
``h(b) = sum_i alpha_i(b) y_i`` (the negated derivative of the partially
minimized primal), located by a bracketed Illinois search.  Every iterate
yields a primal upper bound (with an exactly re-optimized bias) and, once
the root is bracketed, a feasible dual point whose objective is a lower
bound, so termination is certified by the relative duality gap.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .errors import ConfigError

logger = logging.getLogger(__name__)

_LCG_MULT = 6364136223846793005
_LCG_INC = 1442695040888963407
# inexact inner solves are tolerated: bounds stay valid and the next round re-brackets
_MAX_PASSES_PER_SOLVE = 200
# problems up to this many instances use SMO on a dense Gram matrix
SMALL_PROBLEM = 256


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-4
    max_iterations: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Instances with labels in {-1, +1} and one penalty per class."""

    X: sp.csr_matrix
    y: np.ndarray
    C_P: float
    C_U: float

    def __post_init__(self):
        X = self.X
        if not sp.issparse(X):
            X = sp.csr_matrix(np.atleast_2d(np.asarray(X, dtype=float)))
        X = sp.csr_matrix(X, dtype=np.float64)
        X.sum_duplicates()
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if X.shape[0] != y.shape[0]:
            raise ConfigError(f"{X.shape[0]} instances but {y.shape[0]} labels")
        if not np.all((y == 1.0) | (y == -1.0)):
            raise ConfigError("labels must be -1 or +1")
        if not (np.any(y > 0) and np.any(y < 0)):
            raise ConfigError("training set needs at least one instance of each label")
        if not (self.C_P > 0 and self.C_U > 0):
            raise ConfigError(f"penalties must be > 0, got C_P={self.C_P}, C_U={self.C_U}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def penalties(self) -> np.ndarray:
        return np.where(self.y > 0, float(self.C_P), float(self.C_U))


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    objective: float = float("nan")
    iterations: int = 0
    converged: bool = True
    gap: float = 0.0
    metadata: dict = field(default_factory=dict)

    def decision_values(self, X) -> np.ndarray:
        return decision_values(self, X)

    def to_dict(self, manifest_hash: str | None = None) -> dict:
        nz = np.flatnonzero(self.weights)
        return {
            "bias": float(self.bias),
            "dimension": int(self.weights.shape[0]),
            "weights": {str(int(i)): float(self.weights[i]) for i in nz},
            "manifest_hash": manifest_hash,
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "gap": float(self.gap),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        w = np.zeros(int(d["dimension"]))
        for k, v in d["weights"].items():
            w[int(k)] = v
        return cls(
            weights=w,
            bias=float(d["bias"]),
            objective=float(d.get("objective", float("nan"))),
            iterations=int(d.get("iterations", 0)),
            converged=bool(d.get("converged", True)),
            gap=float(d.get("gap", 0.0)),
        )

    def to_json(self, manifest_hash: str | None = None) -> str:
        return json.dumps(self.to_dict(manifest_hash), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        return cls.from_dict(json.loads(text))


@njit(nogil=True, cache=True)
def _dcd_fixed_bias(indptr, indices, data, y, C, qdiag, alpha, w, b, eps,
                    max_passes, state):
    """Dual coordinate descent for the SVM with a fixed bias ``b``.

    Updates ``alpha`` and ``w`` in place.  Returns (passes, converged, state).
    """
    n = y.shape[0]
    order = np.arange(n)
    for p in range(max_passes):
        for i in range(n - 1, 0, -1):
            state = state * _LCG_MULT + _LCG_INC
            j = ((state >> 33) & 0x7FFFFFFF) % (i + 1)
            tmp = order[i]
            order[i] = order[j]
            order[j] = tmp
        max_pg = -np.inf
        min_pg = np.inf
        for k in range(n):
            i = order[k]
            s = 0.0
            for jj in range(indptr[i], indptr[i + 1]):
                s += w[indices[jj]] * data[jj]
            g = y[i] * (s + b) - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= C[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg > max_pg:
                max_pg = pg
            if pg < min_pg:
                min_pg = pg
            if pg != 0.0:
                if qdiag[i] > 0.0:
                    na = min(max(a - g / qdiag[i], 0.0), C[i])
                elif g < 0.0:
                    na = C[i]
                else:
                    na = 0.0
                d = (na - a) * y[i]
                if d != 0.0:
                    for jj in range(indptr[i], indptr[i + 1]):
                        w[indices[jj]] += d * data[jj]
                    alpha[i] = na
        if max_pg - min_pg <= eps:
            return p + 1, True, state
    return max_passes, False, state


@njit(nogil=True, cache=True)
def _smo(Q, y, C, alpha, G, eps, max_iter):
    """SMO with second-order working set selection on a dense Gram matrix.

    ``Q[i, j] = y_i y_j <x_i, x_j>``; ``G = Q alpha - 1`` is kept up to date.
    Returns (iterations, converged).
    """
    n = y.shape[0]
    tau = 1e-12
    for it in range(max_iter):
        gmax = -np.inf
        i = -1
        for t in range(n):
            if (y[t] > 0 and alpha[t] < C[t]) or (y[t] < 0 and alpha[t] > 0):
                v = -y[t] * G[t]
                if v >= gmax:
                    gmax = v
                    i = t
        gmin = np.inf
        j = -1
        obj_min = np.inf
        for t in range(n):
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C[t]):
                v = -y[t] * G[t]
                if v < gmin:
                    gmin = v
                if i >= 0:
                    diff = gmax - v
                    if diff > 0:
                        a = Q[i, i] + Q[t, t] - 2.0 * y[i] * y[t] * Q[i, t]
                        if a <= 0:
                            a = tau
                        val = -diff * diff / a
                        if val <= obj_min:
                            obj_min = val
                            j = t
        if i < 0 or j < 0 or gmax - gmin < eps:
            return it, True
        old_ai = alpha[i]
        old_aj = alpha[j]
        quad = Q[i, i] + Q[j, j] - 2.0 * y[i] * y[j] * Q[i, j]
        if quad <= 0:
            quad = tau
        if y[i] != y[j]:
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > C[i] - C[j]:
                if alpha[i] > C[i]:
                    alpha[i] = C[i]
                    alpha[j] = C[i] - diff
            else:
                if alpha[j] > C[j]:
                    alpha[j] = C[j]
                    alpha[i] = C[j] + diff
        else:
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C[i]:
                if alpha[i] > C[i]:
                    alpha[i] = C[i]
                    alpha[j] = total - C[i]
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C[j]:
                if alpha[j] > C[j]:
                    alpha[j] = C[j]
                    alpha[i] = total - C[j]
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total
        dai = alpha[i] - old_ai
        daj = alpha[j] - old_aj
        for t in range(n):
            G[t] += Q[t, i] * dai + Q[t, j] * daj
    return max_iter, False


def _train_smo(ts: TrainingSet, config: SolverConfig) -> LinearModel:
    X, y, C = ts.X, ts.y, ts.penalties
    K = (X @ X.T).toarray()
    Q = K * np.outer(y, y)
    alpha = np.zeros(y.shape[0])
    G = -np.ones(y.shape[0])
    eps = 1e-3
    total = 0
    gap = np.inf
    best = None
    while True:
        iters, _ = _smo(Q, y, C, alpha, G, eps, max(1, config.max_iterations - total))
        total += iters
        w = X.T @ (alpha * y)
        w = np.asarray(w).ravel()
        scores = X @ w
        b = best_bias(scores, y, C)
        primal = float(0.5 * w @ w + np.sum(C * np.maximum(0.0, 1.0 - y * (scores + b))))
        dual = float(alpha.sum() - 0.5 * w @ w)
        if best is None or primal < best[0]:
            best = (primal, w, b)
        gap = (best[0] - dual) / max(abs(best[0]), 1e-12)
        if gap <= config.tolerance or total >= config.max_iterations or eps <= 1e-13:
            break
        eps *= 0.1
    primal, w, b = best
    converged = gap <= config.tolerance
    if not converged:
        logger.warning("SMO stopped after %d iterations with relative gap %.3g", total, gap)
    return LinearModel(weights=w, bias=b, objective=primal, iterations=total,
                       converged=converged, gap=gap)


def best_bias(scores: np.ndarray, y: np.ndarray, C: np.ndarray) -> float:
    """Exact minimizer over b of sum_i C_i max(0, 1 - y_i (scores_i + b))."""
    kinks = np.where(y > 0, 1.0 - scores, -1.0 - scores)
    order = np.argsort(kinks, kind="stable")
    t = kinks[order]
    c = C[order]
    pos = y[order] > 0
    total_pos = c[pos].sum()
    right = -(total_pos - np.cumsum(np.where(pos, c, 0.0))) + np.cumsum(np.where(pos, 0.0, c))
    k = int(np.argmax(right >= 0.0))
    return float(t[k])


def primal_objective(w, b, X, y, C) -> float:
    margins = y * (X @ w + b)
    return float(0.5 * w @ w + np.sum(C * np.maximum(0.0, 1.0 - margins)))


class _BiasSearch:
    """State of the outer search over the bias term."""

    def __init__(self, ts: TrainingSet, config: SolverConfig):
        X = ts.X
        self.X = X
        self.indptr = X.indptr
        self.indices = X.indices
        self.data = X.data
        self.y = ts.y
        self.C = ts.penalties
        self.qdiag = np.asarray(X.multiply(X).sum(axis=1)).ravel()
        self.alpha = np.zeros(X.shape[0])
        self.w = np.zeros(X.shape[1])
        self.state = np.int64((config.seed * 2654435761 + 1) & 0x7FFFFFFFFFFFFFFF)
        self.passes_left = config.max_iterations
        self.passes = 0
        self.best = None  # (primal, w, b)
        self.lo = None  # (b, h, alpha, w) with h > 0
        self.hi = None  # (b, h, alpha, w) with h < 0
        self.best_dual = -np.inf

    def evaluate(self, b: float, eps: float) -> float:
        passes, _, self.state = _dcd_fixed_bias(
            self.indptr, self.indices, self.data, self.y, self.C, self.qdiag,
            self.alpha, self.w, float(b), float(eps),
            max(1, min(self.passes_left, _MAX_PASSES_PER_SOLVE)), self.state,
        )
        self.passes += passes
        self.passes_left -= passes
        h = float(self.alpha @ self.y)
        self._offer_primal(self.w)
        point = (float(b), h, self.alpha.copy(), self.w.copy())
        if h > 0:
            self.lo = point
        elif h < 0:
            self.hi = point
        else:
            self.lo = self.hi = point
        self._update_dual()
        return h

    def _update_dual(self):
        if self.lo is None or self.hi is None:
            return
        _, h_lo, a_lo, w_lo = self.lo
        _, h_hi, a_hi, w_hi = self.hi
        lam = 1.0 if h_lo == h_hi else -h_hi / (h_lo - h_hi)
        wv = lam * w_lo + (1.0 - lam) * w_hi
        dual = float(lam * a_lo.sum() + (1.0 - lam) * a_hi.sum() - 0.5 * wv @ wv)
        self.best_dual = max(self.best_dual, dual)
        # w is continuous in b, so the combined hyperplane is also a good primal point
        self._offer_primal(wv)

    def _offer_primal(self, w):
        scores = self.X @ w
        bb = best_bias(scores, self.y, self.C)
        primal = float(0.5 * w @ w + np.sum(self.C * np.maximum(0.0, 1.0 - self.y * (scores + bb))))
        if self.best is None or primal < self.best[0]:
            self.best = (primal, w.copy(), bb)

    @property
    def gap(self) -> float:
        primal = self.best[0]
        return (primal - self.best_dual) / max(abs(primal), 1e-12)


def _bracket_and_refine(s: _BiasSearch, b: float, step: float, eps: float, tol: float):
    h = s.evaluate(b, eps)
    for _ in range(200):
        if (s.lo is not None and s.hi is not None) or s.passes_left <= 0:
            break
        b = b + step if h > 0 else b - step
        step *= 2.0
        h = s.evaluate(b, eps)
    if s.lo is None or s.hi is None:
        return
    # Illinois variant of regula falsi on the monotone decreasing h(b)
    f_lo, f_hi = s.lo[1], s.hi[1]
    last = 0
    while s.gap > tol and s.passes_left > 0 and s.lo is not s.hi:
        b_lo, b_hi = s.lo[0], s.hi[0]
        width = abs(b_hi - b_lo)
        if width <= 1e-3 * (1.0 + abs(b_lo)) and eps > 1e-12:
            return
        if width <= 1e-12 * (1.0 + abs(b_lo)):
            return
        b = b_lo - f_lo * (b_hi - b_lo) / (f_hi - f_lo)
        h = s.evaluate(b, eps)
        if h > 0:
            f_lo = h
            if last == 1:
                f_hi *= 0.5
            last = 1
        elif h < 0:
            f_hi = h
            if last == -1:
                f_lo *= 0.5
            last = -1


def train(training_set: TrainingSet, config: SolverConfig | None = None) -> LinearModel:
    """Fit the class-weighted SVM; see the module docstring for the method.

    A result that exhausts ``config.max_iterations`` coordinate-descent passes
    before reaching the gap tolerance is returned with ``converged=False`` and
    the achieved gap.
    """
    config = config or SolverConfig()
    if training_set.X.shape[0] <= SMALL_PROBLEM:
        return _train_smo(training_set, config)
    s = _BiasSearch(training_set, config)
    tol = config.tolerance
    eps = 0.1
    b = 0.0
    step = 1.0
    # Each round brackets the root at one inner accuracy.  Bounds from earlier
    # rounds stay valid; bracket endpoints do not, since h was computed inexactly.
    while s.passes_left > 0:
        s.lo = s.hi = None
        _bracket_and_refine(s, b, step, eps, tol)
        if s.gap <= tol or s.passes_left <= 0 or eps <= 1e-12:
            break
        if s.lo is None or s.hi is None:
            break
        b = 0.5 * (s.lo[0] + s.hi[0])
        step = max(abs(s.hi[0] - s.lo[0]), 1e-6 * (1.0 + abs(b)))
        eps *= 0.1

    primal, w, bias = s.best
    converged = s.gap <= tol
    if not converged:
        logger.info("SVM stopped after %d passes with relative gap %.3g", s.passes, s.gap)
    return LinearModel(
        weights=w,
        bias=bias,
        objective=primal,
        iterations=s.passes,
        converged=converged,
        gap=s.gap,
    )


def decision_values(model: LinearModel, instances) -> np.ndarray:
    """<w, x> + b for every row of ``instances``."""
    X = instances if sp.issparse(instances) else np.atleast_2d(np.asarray(instances, dtype=float))
    if X.shape[1] != model.weights.shape[0]:
        raise ConfigError(f"model has {model.weights.shape[0]} features, instances have {X.shape[1]}")
    out = X @ model.weights
    return np.asarray(out, dtype=float).ravel() + model.bias
