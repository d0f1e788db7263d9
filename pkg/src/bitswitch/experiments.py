"""Desk-scale experiment protocols.

Two reusable recipes sit behind both the acceptance suite and the runnable
scripts:

* ``multiprec_comparison`` — joint training over {8, 6, 4, 2} on gaussian
  blobs, conventional vs. adaptive scale-rate mode, against per-width
  baselines trained separately from the same float seed model.
* ``hasb_comparison`` — supernet training with sensitivity-weighted bit
  switching vs. a uniform-roulette control, then a width-constrained search
  whose winning assignments are scored on held-out data at several average
  widths.

Every random choice derives from the single ``seed`` argument, so repeated
calls reproduce results exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import gaussian_blobs, train_eval_split
from .nn import Network, NormStats, mlp
from .quant import BitWidthSet
from .search import SearchProblem, SubNetAssignment, enumerate_solutions, solve
from .sensitivity import SensitivityProfile, profile_network
from .supernet import SupernetConfig, SupernetTrainer, make_edge_tables
from .trainer import (MultiPrecTrainer, TrainConfig, evaluate_float,
                      init_quant_params, train_float)

CALIB_SAMPLES = 256


def _child_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def blob_data(seed: int, samples: int = 2000, classes: int = 4, features: int = 16,
              eval_fraction: float = 0.2):
    x, y = gaussian_blobs(samples, classes, features, seed=seed, spread=1.5)
    return train_eval_split(x, y, eval_fraction, seed=seed)


def pretrained_float(dims, train_x, train_y, seed: int, epochs: int = 10,
                     batch_size: int = 64, lr: float = 1e-3,
                     weight_decay: float = 5e-5):
    """Float seed model shared by every arm of a comparison."""
    net = mlp(dims, _child_rng(seed, 1))
    norm = train_float(net, train_x, train_y, epochs, batch_size, lr,
                       weight_decay, seed=seed)
    return net, norm


def _clone_norm(norm: dict[int, NormStats]) -> dict[int, NormStats]:
    return {site: stats.copy() for site, stats in norm.items()}


# -- joint multi-precision vs. separate baselines ---------------------------


@dataclass
class MultiPrecResult:
    seed: int
    float_accuracy: float
    one_shot: dict[str, dict[int, float]]  # mode -> width -> accuracy
    separate: dict[int, float]             # width -> accuracy

    def spread(self, mode: str) -> float:
        accs = self.one_shot[mode].values()
        return max(accs) - min(accs)

    def deficit(self, mode: str, bits: int) -> float:
        """How far the jointly trained model trails the separate baseline."""
        return self.separate[bits] - self.one_shot[mode][bits]


def multiprec_comparison(seed: int, bits: tuple[int, ...] = (8, 6, 4, 2),
                         hidden: tuple[int, ...] = (32, 32, 32),
                         samples: int = 2000, classes: int = 4,
                         features: int = 16, epochs: int = 30,
                         float_epochs: int = 10, batch_size: int = 64,
                         base_lr: float = 1e-3,
                         recorders: dict | None = None) -> MultiPrecResult:
    """Train both joint modes and per-width baselines from one float seed.

    ``recorders`` optionally maps mode name -> MetricsRecorder for the two
    joint arms.
    """
    bit_set = BitWidthSet(bits)
    train_x, train_y, eval_x, eval_y = blob_data(seed, samples, classes, features)
    dims = (features, *hidden, classes)
    float_net, float_norm = pretrained_float(dims, train_x, train_y, seed,
                                             epochs=float_epochs,
                                             batch_size=batch_size, lr=base_lr)
    float_acc = evaluate_float(float_net, float_norm, eval_x, eval_y)
    calib_x = train_x[:CALIB_SAMPLES]

    one_shot: dict[str, dict[int, float]] = {}
    for mode in ("conventional", "alrs"):
        cfg = TrainConfig(bits=bit_set, epochs=epochs, batch_size=batch_size,
                          base_lr=base_lr, mode=mode)
        trainer = MultiPrecTrainer.initialize(
            float_net.copy(), cfg, calib_x, _clone_norm(float_norm), seed=seed)
        recorder = None if recorders is None else recorders.get(mode)
        trainer.run(train_x, train_y, eval_x, eval_y, recorder)
        one_shot[mode] = {b: trainer.evaluate(b, eval_x, eval_y) for b in bit_set}

    separate: dict[int, float] = {}
    for b in bit_set:
        cfg = TrainConfig(bits=BitWidthSet((b,)), epochs=epochs,
                          batch_size=batch_size, base_lr=base_lr,
                          mode="conventional")
        trainer = MultiPrecTrainer.initialize(
            float_net.copy(), cfg, calib_x, _clone_norm(float_norm), seed=seed)
        trainer.run(train_x, train_y, eval_x, eval_y)
        separate[b] = trainer.evaluate(b, eval_x, eval_y)

    return MultiPrecResult(seed=seed, float_accuracy=float_acc,
                           one_shot=one_shot, separate=separate)


# -- sensitivity-weighted supernet vs. uniform control ----------------------


@dataclass
class HasbResult:
    seed: int
    profile: SensitivityProfile
    # arm -> average width -> every scored assignment (accuracy attached)
    evaluated: dict[str, dict[int, list[SubNetAssignment]]] = field(default_factory=dict)

    def best(self, arm: str, avg_bits: int) -> float:
        return max(a.accuracy for a in self.evaluated[arm][avg_bits])

    @property
    def arms(self) -> tuple[str, ...]:
        return tuple(self.evaluated)


def _candidate_assignments(profile_weights, bit_set: BitWidthSet,
                           omega: int) -> list[SubNetAssignment]:
    """Search winners plus the uniform assignment at the target width."""
    problem = SearchProblem(candidates=bit_set.bits,
                            layer_weights=profile_weights,
                            target_avg=Fraction(omega))
    found = enumerate_solutions(problem)
    if omega in bit_set:
        layers = len(profile_weights)
        uniform_bits = (omega,) * layers
        if all(a.bits != uniform_bits for a in found):
            objective = float(sum(w * omega for w in profile_weights))
            found.append(SubNetAssignment(uniform_bits, objective, Fraction(omega)))
    return found


def hasb_comparison(seed: int, bits: tuple[int, ...] = (8, 6, 4, 2),
                    hidden: tuple[int, ...] = (32, 32, 32, 32, 32),
                    samples: int = 2000, classes: int = 4, features: int = 16,
                    epochs: int = 30, float_epochs: int = 10,
                    batch_size: int = 64, base_lr: float = 1e-3,
                    probes: int = 64, sigma_max: float = 0.5,
                    avg_widths: tuple[int, ...] = (3, 4, 5),
                    recorders: dict | None = None) -> HasbResult:
    """Run both supernet arms from one float seed and score the search output.

    The two arms share the float model, the sensitivity profile (computed on
    the float model), the searched candidate assignments, and all data; only
    the roulette differs, so accuracy differences isolate the sampling rule.
    """
    bit_set = BitWidthSet(bits)
    train_x, train_y, eval_x, eval_y = blob_data(seed, samples, classes, features)
    dims = (features, *hidden, classes)
    float_net, float_norm = pretrained_float(dims, train_x, train_y, seed,
                                             epochs=float_epochs,
                                             batch_size=batch_size, lr=base_lr)
    calib_x = train_x[:CALIB_SAMPLES]
    calib_y = train_y[:CALIB_SAMPLES]
    profile = profile_network(float_net, float_norm, calib_x, calib_y,
                              probes=probes, seed=seed)

    # One candidate list per average width, shared verbatim by both arms.
    q_indices = float_net.quantized_indices
    weights = tuple(profile.trace_of(i) for i in q_indices)
    candidates = {w: _candidate_assignments(weights, bit_set, w) for w in avg_widths}

    result = HasbResult(seed=seed, profile=profile)
    for arm in ("hessian", "uniform"):
        net = float_net.copy()
        cfg = SupernetConfig(bits=bit_set, epochs=epochs, batch_size=batch_size,
                             base_lr=base_lr, sigma_max=sigma_max, roulette=arm)
        qparams = init_quant_params(net, bit_set, calib_x, float_norm)
        norm_per_bit = {b: _clone_norm(float_norm) for b in bit_set}
        edges = make_edge_tables(net, bit_set, norm_per_bit)
        trainer = SupernetTrainer(net, cfg, qparams, edges,
                                  profile if arm == "hessian" else None, seed=seed)
        recorder = None if recorders is None else recorders.get(arm)
        trainer.run(train_x, train_y, eval_x, eval_y, recorder)

        scored: dict[int, list[SubNetAssignment]] = {}
        for w, assignments in candidates.items():
            rows = []
            for a in assignments:
                acc = trainer.evaluate_subnet(dict(zip(q_indices, a.bits)),
                                              eval_x, eval_y)
                rows.append(a.with_accuracy(acc))
            scored[w] = rows
        result.evaluated[arm] = scored
    return result
