"""Particle swarm maximization over a bounded hyperparameter box."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError, GlaRiskError

log = logging.getLogger(__name__)

OMEGA = 0.7298
C1 = 1.49618
C2 = 1.49618


@dataclass(frozen=True)
class Param:
    name: str
    lower: float
    upper: float
    scale: str = "linear"
    kind: str = "real"

    def __post_init__(self):
        if self.scale not in ("linear", "log10"):
            raise ConfigError(f"{self.name}: scale must be linear or log10")
        if self.kind not in ("real", "integer"):
            raise ConfigError(f"{self.name}: kind must be real or integer")
        if not self.lower < self.upper:
            raise ConfigError(f"{self.name}: lower {self.lower} must be < upper {self.upper}")
        if self.scale == "log10" and self.lower <= 0:
            raise ConfigError(f"{self.name}: log-scale bounds must be > 0")

    def to_internal(self, v: float) -> float:
        return math.log10(v) if self.scale == "log10" else float(v)

    def from_internal(self, u: float):
        v = 10.0**u if self.scale == "log10" else float(u)
        v = min(max(v, self.lower), self.upper)
        if self.kind == "integer":
            return int(min(max(round(v), math.ceil(self.lower)), math.floor(self.upper)))
        return v


@dataclass(frozen=True)
class SearchBox:
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        names = [p.name for p in self.params]
        if not names:
            raise ConfigError("search box has no parameters")
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def lo(self) -> np.ndarray:
        return np.array([p.to_internal(p.lower) for p in self.params])

    @property
    def hi(self) -> np.ndarray:
        return np.array([p.to_internal(p.upper) for p in self.params])

    def decode(self, u: np.ndarray) -> dict:
        return {p.name: p.from_internal(float(x)) for p, x in zip(self.params, u)}


@dataclass
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    pbest_pos: np.ndarray
    pbest_val: np.ndarray
    gbest_pos: np.ndarray
    gbest_val: float
    generation: int
    seed: int


@dataclass(frozen=True)
class TraceEntry:
    generation: int
    particle: int
    params: dict
    value: float


def optimize(objective: Callable[[dict], float], box: SearchBox, swarm_size: int = 10,
             generations: int = 10, seed: int = 0, workers: int = 1):
    """Maximize ``objective`` and return (best_params, best_value, trace).

    Positions live in internal coordinates (log10 for log-scale parameters)
    and are clamped to the box after each move.  A raising or non-finite
    objective scores -inf.
    """
    if swarm_size < 1:
        raise ConfigError(f"swarm_size must be >= 1, got {swarm_size}")
    if generations < 0:
        raise ConfigError(f"generations must be >= 0, got {generations}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x950]))
    lo, hi = box.lo, box.hi
    width = hi - lo
    d = lo.size
    lhs = qmc.LatinHypercube(d=d, seed=rng).random(swarm_size)
    pos = lo + lhs * width
    vel = rng.uniform(-0.5, 0.5, size=(swarm_size, d)) * width

    trace: list[TraceEntry] = []

    def evaluate(gen: int, positions: np.ndarray) -> np.ndarray:
        params = [box.decode(x) for x in positions]

        def safe(p):
            try:
                v = float(objective(p))
            except Exception as exc:  # noqa: BLE001 - any failing evaluation is scored -inf
                log.warning("objective failed at %s: %s", p, exc)
                return -math.inf
            return v if not math.isnan(v) else -math.inf

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                vals = list(pool.map(safe, params))
        else:
            vals = [safe(p) for p in params]
        for i, (p, v) in enumerate(zip(params, vals)):
            trace.append(TraceEntry(gen, i, p, v))
        return np.array(vals)

    vals = evaluate(0, pos)
    state = SwarmState(pos.copy(), vel, pos.copy(), vals.copy(), pos[0].copy(), -math.inf, 0, seed)
    _update_global(state)
    for gen in range(1, generations + 1):
        r1 = rng.random((swarm_size, d))
        r2 = rng.random((swarm_size, d))
        state.velocities = (OMEGA * state.velocities
                            + C1 * r1 * (state.pbest_pos - state.positions)
                            + C2 * r2 * (state.gbest_pos[None, :] - state.positions))
        state.positions = np.clip(state.positions + state.velocities, lo, hi)
        vals = evaluate(gen, state.positions)
        better = vals > state.pbest_val
        state.pbest_pos[better] = state.positions[better]
        state.pbest_val[better] = vals[better]
        state.generation = gen
        _update_global(state)
    if not np.isfinite(state.gbest_val):
        raise GlaRiskError("every objective evaluation failed")
    return box.decode(state.gbest_pos), float(state.gbest_val), trace


def _update_global(state: SwarmState) -> None:
    # first index wins ties, so the result does not depend on evaluation order
    i = int(np.argmax(state.pbest_val))
    if state.pbest_val[i] > state.gbest_val:
        state.gbest_val = float(state.pbest_val[i])
        state.gbest_pos = state.pbest_pos[i].copy()


def best_so_far(trace: Sequence[TraceEntry]) -> list[float]:
    """Global-best value after each generation."""
    out, best = [], -math.inf
    gens = sorted({t.generation for t in trace})
    for g in gens:
        best = max([best] + [t.value for t in trace if t.generation == g])
        out.append(best)
    return out


def write_trace_csv(trace: Sequence[TraceEntry], names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "particle", *names, "value"])
        for t in trace:
            w.writerow([t.generation, t.particle, *(f"{t.params[n]:.6g}" for n in names), f"{t.value:.6g}"])
