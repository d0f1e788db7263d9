"""Constrained bit-width assignment search.

Given per-layer importance weights (trace per parameter) and a required
average width, the solver picks one candidate width per layer so the widths
sum to exactly ``average * layers`` while the weighted sum of widths is
optimal.  The default sense is maximize, which puts wider candidates on the
layers with higher importance; ``sense="minimize"`` flips it.

The layer count is desk-scale, so an exact dynamic program over (layer,
partial width sum) replaces an ILP solver; ties reconstruct to the
lexicographically widest assignment for determinism.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InfeasibleError

_INVALID = -math.inf


@dataclass(frozen=True)
class SearchProblem:
    candidates: tuple[int, ...]          # allowed widths, any order, distinct
    layer_weights: tuple[float, ...]     # importance per layer (trace / params)
    target_avg: Fraction                 # required mean width over layers
    sense: str = "maximize"              # or "minimize"

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(int(b) for b in self.candidates))
        object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))
        object.__setattr__(self, "target_avg", Fraction(self.target_avg))
        if not self.candidates or len(set(self.candidates)) != len(self.candidates):
            raise ConfigError(f"candidates must be distinct and non-empty, got {self.candidates}")
        if any(b < 1 for b in self.candidates):
            raise ConfigError("candidate widths must be positive")
        if not self.layer_weights:
            raise ConfigError("at least one layer is required")
        if self.sense not in ("maximize", "minimize"):
            raise ConfigError(f"sense must be maximize or minimize, got {self.sense!r}")

    @property
    def layers(self) -> int:
        return len(self.layer_weights)

    @property
    def target_sum(self) -> int:
        total = self.target_avg * self.layers
        if total.denominator != 1:
            raise InfeasibleError(
                f"average width {self.target_avg} over {self.layers} layers "
                f"needs a non-integer total {total}; no assignment exists",
                achievable=achievable_averages_of(self.candidates, self.layers),
            )
        return int(total)


@dataclass(frozen=True)
class SubNetAssignment:
    bits: tuple[int, ...]
    objective: float
    avg_bits: Fraction
    accuracy: Optional[float] = None

    def with_accuracy(self, accuracy: float) -> "SubNetAssignment":
        return SubNetAssignment(self.bits, self.objective, self.avg_bits, accuracy)


def achievable_averages_of(candidates: Sequence[int], layers: int) -> tuple[Fraction, ...]:
    """All feasible average widths for the given candidate set and depth."""
    sums = {0}
    for _ in range(layers):
        sums = {s + b for s in sums for b in candidates}
    return tuple(sorted(Fraction(s, layers) for s in sums))


def _value_table(problem: SearchProblem, pins: dict[int, int]) -> np.ndarray:
    """Backward DP: best[i][s] = optimal objective of layers i.. with width
    budget s remaining.  Minimize runs on negated weights so one table serves
    both senses."""
    target = problem.target_sum
    layers = problem.layers
    sign = 1.0 if problem.sense == "maximize" else -1.0
    best = np.full((layers + 1, target + 1), _INVALID)
    best[layers][0] = 0.0
    for i in range(layers - 1, -1, -1):
        options = (pins[i],) if i in pins else problem.candidates
        w = sign * problem.layer_weights[i]
        for s in range(target + 1):
            top = _INVALID
            for b in options:
                if b <= s and best[i + 1][s - b] != _INVALID:
                    value = w * b + best[i + 1][s - b]
                    if value > top:
                        top = value
            best[i][s] = top
    return best


def _reconstruct(problem: SearchProblem, pins: dict[int, int], best: np.ndarray) -> tuple[int, ...]:
    """Walk the table front-to-back, preferring the widest bit at each layer
    among optimal continuations (deterministic tie-break)."""
    sign = 1.0 if problem.sense == "maximize" else -1.0
    remaining = problem.target_sum
    bits = []
    for i in range(problem.layers):
        options = (pins[i],) if i in pins else problem.candidates
        w = sign * problem.layer_weights[i]
        chosen = None
        for b in sorted(options, reverse=True):
            if b <= remaining and best[i + 1][remaining - b] != _INVALID:
                if w * b + best[i + 1][remaining - b] == best[i][remaining]:
                    chosen = b
                    break
        assert chosen is not None, "reconstruction disagrees with the value table"
        bits.append(chosen)
        remaining -= chosen
    return tuple(bits)


def solve(problem: SearchProblem, pins: Optional[dict[int, int]] = None) -> SubNetAssignment:
    """Optimal assignment under the exact average-width constraint.

    ``pins`` fixes chosen layers to specific widths (used by the enumeration).
    Raises InfeasibleError, listing the achievable averages, when no
    assignment reaches the target.
    """
    pins = dict(pins or {})
    for i, b in pins.items():
        if i < 0 or i >= problem.layers:
            raise ConfigError(f"pin on layer {i} outside the network")
        if b not in problem.candidates:
            raise ConfigError(f"pinned width {b} not among candidates {problem.candidates}")
    target = problem.target_sum
    if not problem.layers * min(problem.candidates) <= target <= problem.layers * max(problem.candidates):
        raise InfeasibleError(
            f"total width {target} outside what {problem.candidates} can reach "
            f"over {problem.layers} layers",
            achievable=achievable_averages_of(problem.candidates, problem.layers),
        )
    best = _value_table(problem, pins)
    if best[0][target] == _INVALID:
        raise InfeasibleError(
            f"no assignment of {problem.candidates} over {problem.layers} layers "
            f"averages exactly {problem.target_avg}",
            achievable=achievable_averages_of(problem.candidates, problem.layers),
        )
    bits = _reconstruct(problem, pins, best)
    objective = float(sum(w * b for w, b in zip(problem.layer_weights, bits)))
    return SubNetAssignment(bits, objective, Fraction(sum(bits), problem.layers))


def enumerate_solutions(problem: SearchProblem) -> list[SubNetAssignment]:
    """Base optimum plus the pinned re-solves.

    For each layer of the base solution, every candidate width strictly below
    the base solution's widest bit (and different from the current choice) is
    pinned in turn and the problem re-solved; feasible, novel assignments are
    appended in discovery order."""
    base = solve(problem)
    solutions = [base]
    seen = {base.bits}
    widest = max(base.bits)
    below = sorted(b for b in problem.candidates if b < widest)
    for i in range(problem.layers):
        for b in below:
            if b == base.bits[i]:
                continue
            try:
                alt = solve(problem, pins={i: b})
            except InfeasibleError:
                continue
            if alt.bits not in seen:
                seen.add(alt.bits)
                solutions.append(alt)
    return solutions


def pareto_front(assignments: Sequence[SubNetAssignment]) -> list[SubNetAssignment]:
    """Non-dominated set under (accuracy up, average width down).

    Duplicate (width, accuracy) points collapse to one; the result is sorted
    by average width ascending."""
    scored = [a for a in assignments if a.accuracy is not None]
    if len(scored) != len(assignments):
        raise ConfigError("every assignment needs an accuracy before Pareto filtering")
    ordered = sorted(scored, key=lambda a: (a.avg_bits, -a.accuracy))
    front: list[SubNetAssignment] = []
    best_acc = -math.inf
    seen: set[tuple[Fraction, float]] = set()
    for a in ordered:
        point = (a.avg_bits, a.accuracy)
        if point in seen:
            continue
        seen.add(point)
        if a.accuracy > best_acc:
            front.append(a)
            best_acc = a.accuracy
    return front
