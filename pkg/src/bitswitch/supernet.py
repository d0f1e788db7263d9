"""Mixed-precision supernet training with sensitivity-weighted bit switching.

Each batch still loops over the candidate widths, but every quantized layer
may replace the loop width with one drawn from a roulette wheel: sensitive
layers (trace >= mean) favor wider candidates with probability proportional
to the bit value, insensitive layers draw uniformly.  The switching
probability ramps linearly over training up to ``sigma_max``.

Because a layer's input distribution depends on the width of the layer that
produced it, each batch-norm site keeps an n^2 table of NormStats keyed by
(producer width, own width); the first quantized layer uses the diagonal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .nn import Network, NormStats, QuantContext, backward, forward, softmax_cross_entropy
from .optim import Adam, cosine_lr
from .quant import BitWidthSet, LayerQuantParams
from .sensitivity import SensitivityProfile
from .state import EdgeKey, ModelState
from .trainer import alrs_lr, clamp_scales, named_parameters, named_scales


def roulette_select(candidates, layer_trace: float, mean_trace: float, r: float) -> int:
    """Pick a width by cumulative probability walk.

    Sensitive layers (``layer_trace >= mean_trace``) weight each candidate by
    its bit value over the sum of all candidates; insensitive layers use a
    uniform wheel.  ``r`` must lie in (0, 1]; the walk returns the first
    candidate whose cumulative probability reaches it.
    """
    bits = [int(b) for b in candidates]
    if not bits or len(set(bits)) != len(bits):
        raise ConfigError(f"candidates must be distinct and non-empty, got {candidates}")
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"roulette draw must lie in (0, 1], got {r}")
    if layer_trace >= mean_trace:
        total = float(sum(bits))
        probs = [b / total for b in bits]
    else:
        probs = [1.0 / len(bits)] * len(bits)
    cum = 0.0
    for b, p in zip(bits, probs):
        cum += p
        if cum >= r:
            return b
    return bits[-1]  # float accumulation guard for r = 1.0


def sigma_schedule(sigma_max: float, epoch: int, total_epochs: int) -> float:
    """Linear ramp of the switching probability: sigma_max * (epoch+1)/total."""
    if not 0.0 < sigma_max <= 1.0:
        raise ConfigError(f"sigma_max must lie in (0, 1], got {sigma_max}")
    if total_epochs < 1 or epoch < 0 or epoch >= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    return sigma_max * (epoch + 1) / total_epochs


@dataclass
class SupernetConfig:
    bits: BitWidthSet
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 5e-5
    sigma_max: float = 0.5
    roulette: str = "hessian"  # or "uniform" (every layer insensitive)
    use_alrs: bool = False
    alrs_floor: float = 0.0
    bit_order: str = "descending"

    def validate(self) -> None:
        if self.roulette not in ("hessian", "uniform"):
            raise ConfigError(f"roulette must be hessian or uniform, got {self.roulette!r}")
        if not 0.0 < self.sigma_max <= 1.0:
            raise ConfigError(f"sigma_max must lie in (0, 1], got {self.sigma_max}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.bit_order not in ("descending", "ascending"):
            raise ConfigError(f"bit_order must be descending or ascending, got {self.bit_order!r}")

    @property
    def loop_bits(self) -> tuple[int, ...]:
        bits = self.bits.bits
        return bits if self.bit_order == "descending" else tuple(reversed(bits))


def make_edge_tables(net: Network, bits: BitWidthSet,
                     norm_per_bit: dict[int, dict[int, NormStats]]) -> dict[int, dict[EdgeKey, NormStats]]:
    """n^2 transitional tables per site, seeded from per-width statistics of
    the table entry's *own* width (the producer only shifts the input)."""
    tables: dict[int, dict[EdgeKey, NormStats]] = {}
    for site in net.norm_indices:
        table: dict[EdgeKey, NormStats] = {}
        for producer in bits:
            for current in bits:
                table[(producer, current)] = norm_per_bit[current][site].copy()
        tables[site] = table
    return tables


def _norm_ctx_for_assignment(net: Network, assignment: dict[int, int],
                             tables: dict[int, dict[EdgeKey, NormStats]]) -> dict[int, NormStats]:
    """Resolve each site's (producer, own) edge for a concrete assignment.

    Sites follow their quantized layer immediately, so a site's own width is
    the width of the nearest preceding quantized layer, and its producer is
    the quantized layer before that one (itself, for the first)."""
    ctx: dict[int, NormStats] = {}
    previous: int | None = None
    own: int | None = None
    for idx, layer in enumerate(net.layers):
        if idx in assignment:
            previous = own
            own = assignment[idx]
        if idx in tables:
            if own is None:
                raise ConfigError(f"norm site {idx} precedes every quantized layer")
            producer = previous if previous is not None else own
            ctx[idx] = tables[idx][(producer, own)]
    return ctx


class SupernetTrainer:
    """Trains one shared model under randomized per-layer widths."""

    def __init__(self, net: Network, cfg: SupernetConfig,
                 qparams: dict[int, LayerQuantParams],
                 norm_edges: dict[int, dict[EdgeKey, NormStats]],
                 profile: SensitivityProfile | None, seed: int = 0):
        cfg.validate()
        if cfg.roulette == "hessian" and profile is None:
            raise ConfigError("hessian roulette requires a sensitivity profile")
        self.cfg = cfg
        self.state = ModelState(
            net=net, bits=cfg.bits, qparams=qparams, norm_edges=norm_edges,
            shared_weight_scale=next(iter(qparams.values())).shared_weight_scale if qparams else True,
        )
        self.profile = profile
        self.opt_weights = Adam(named_parameters(net), weight_decay=cfg.weight_decay)
        self.opt_scales = Adam(named_scales(qparams), weight_decay=0.0)
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self.bit_counts: dict[tuple[int, int], int] = {}
        self.last_lambda: dict[int, float] = {}

    # -- width sampling ------------------------------------------------------

    def _trace_pair(self, layer_idx: int) -> tuple[float, float]:
        if self.cfg.roulette == "uniform" or self.profile is None:
            return 0.0, 1.0  # strictly below the mean: the uniform branch
        return self.profile.trace_of(layer_idx), self.profile.mean_trace

    def sample_layer_bits(self, base_bit: int, sigma: float) -> dict[int, int]:
        """Realized width per quantized layer for one pass."""
        realized = {}
        for idx in self.state.net.quantized_indices:
            switch = self.rng.random() < sigma
            if switch:
                trace, mean = self._trace_pair(idx)
                draw = 1.0 - self.rng.random()  # (0, 1]
                realized[idx] = roulette_select(self.cfg.bits.bits, trace, mean, draw)
            else:
                realized[idx] = base_bit
        return realized

    # -- training ------------------------------------------------------------

    def step(self, x, y, lr: float, epoch: int, recorder=None) -> dict[int, float]:
        sigma = sigma_schedule(self.cfg.sigma_max, epoch, self.cfg.epochs)
        net = self.state.net
        losses: dict[int, float] = {}
        num_q = len(net.quantized_indices)
        for base_bit in self.cfg.loop_bits:
            assignment = self.sample_layer_bits(base_bit, sigma)
            for idx, b in assignment.items():
                self.bit_counts[(idx, b)] = self.bit_counts.get((idx, b), 0) + 1
            ctx = QuantContext(bits=assignment, params=self.state.qparams)
            norm_ctx = _norm_ctx_for_assignment(net, assignment, self.state.norm_edges)
            logits, cache = forward(net, x, ctx, norm_ctx, training=True)
            loss, _ = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise NumericalError(f"loss diverged in the {base_bit}-bit supernet pass")
            losses[base_bit] = loss
            grads = backward(net, cache, y)
            named_w = {f"L{i}.weight": g for i, g in grads.weights.items()}
            named_w.update({f"L{i}.bias": g for i, g in grads.biases.items()})
            named_s: dict[str, float] = {}
            for i, g in grads.weight_scales.items():
                qp = self.state.qparams[i]
                key = f"L{i}.wscale" if qp.shared_weight_scale else f"L{i}.wscale{assignment[i]}"
                named_s[key] = g
            for i, g in grads.act_scales.items():
                named_s[f"L{i}.xscale{assignment[i]}"] = g
            if self.cfg.use_alrs:
                vectors = [
                    np.array([grads.weight_scales[i], grads.act_scales[i]])
                    for i in sorted(grads.weight_scales)
                ]
                lam = alrs_lr(base_bit, lr, vectors, num_q, self.cfg.bits.highest,
                              self.cfg.alrs_floor)
            else:
                lam = lr
            self.opt_weights.step(named_w, lr)
            if named_s:
                self.opt_scales.step(named_s, lam)
                clamp_scales(self.state.qparams)
            self.last_lambda[base_bit] = lam
        self.step_count += 1
        return losses

    def run(self, train_x, train_y, eval_x, eval_y, recorder=None) -> None:
        cfg = self.cfg
        n = train_x.shape[0]
        steps = max(1, math.ceil(n / cfg.batch_size))
        for epoch in range(cfg.epochs):
            lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs)
            perm = self.rng.permutation(n)
            sums = {b: 0.0 for b in cfg.bits}
            for s in range(steps):
                sel = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                losses = self.step(train_x[sel], train_y[sel], lr, epoch, recorder)
                for b, v in losses.items():
                    sums[b] += v
            if recorder is not None:
                for b in cfg.bits:
                    acc = self.evaluate_uniform(b, eval_x, eval_y)
                    recorder.metric(epoch, b, sums[b] / steps, acc,
                                    self.last_lambda.get(b, lr))

    # -- evaluation ----------------------------------------------------------

    def evaluate_subnet(self, assignment: dict[int, int], x, y) -> float:
        return evaluate_assignment(self.state, assignment, x, y)

    def evaluate_uniform(self, bits: int, x, y) -> float:
        indices = self.state.net.quantized_indices
        return self.evaluate_subnet({i: bits for i in indices}, x, y)


def evaluate_assignment(state: ModelState, assignment: dict[int, int], x, y) -> float:
    """Accuracy of one concrete per-layer width assignment."""
    if not state.mixed:
        raise ConfigError("per-layer assignments need a mixed state with edge tables")
    for idx, b in assignment.items():
        if b not in state.bits:
            raise ConfigError(f"width {b} for layer {idx} not in the trained set {state.bits.bits}")
    missing = [i for i in state.net.quantized_indices if i not in assignment]
    if missing:
        raise ConfigError(f"assignment misses quantized layers {missing}")
    ctx = QuantContext(bits=dict(assignment), params=state.qparams,
                       stored_ints=state.stored_ints)
    norm_ctx = _norm_ctx_for_assignment(state.net, assignment, state.norm_edges)
    logits, _ = forward(state.net, x, ctx, norm_ctx, training=False)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))
