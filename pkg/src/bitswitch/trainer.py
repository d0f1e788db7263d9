"""One-shot joint training over several precisions.

Every batch runs one forward/backward per candidate width against shared
float masters.  ``conventional`` mode accumulates the per-width gradients and
applies a single optimizer step per batch; ``alrs`` mode steps immediately
after each width's backward pass, with the scale optimizer's learning rate
rescaled per width: lambda_b = eta_b * (lambda - mean_i min(max|clip(g_i)|, 1))
where eta_b shrinks by 10x per two bits of distance from the storage width.

Weights use Adam with decoupled weight decay; quantization scales use a second
Adam whose weight decay is always zero.  Batch-norm statistics are kept per
width, so each precision owns its own normalization state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from . import nn, quant
from .nn import Network, NormStats, QuantContext, forward, backward, softmax_cross_entropy
from .optim import Adam, cosine_lr
from .quant import BitWidthSet, LayerQuantParams
from .state import ModelState

GRAD_CLIP_LIMIT = 1.0


@dataclass
class TrainConfig:
    bits: BitWidthSet
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 5e-5
    mode: str = "conventional"  # or "alrs"
    alrs_floor: float = 0.0
    bit_order: str = "descending"  # loop order over widths within a batch
    shared_weight_scale: bool = True
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if self.mode not in ("conventional", "alrs"):
            raise ConfigError(f"mode must be conventional or alrs, got {self.mode!r}")
        if self.alrs_floor < 0:
            raise ConfigError(f"alrs_floor must be >= 0, got {self.alrs_floor}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.bit_order not in ("descending", "ascending"):
            raise ConfigError(f"bit_order must be descending or ascending, got {self.bit_order!r}")

    @property
    def loop_bits(self) -> tuple[int, ...]:
        bits = self.bits.bits
        return bits if self.bit_order == "descending" else tuple(reversed(bits))


def clip_grad(g, limit: float = GRAD_CLIP_LIMIT) -> np.ndarray:
    """Element-wise clamp to [-limit, limit]."""
    return np.clip(np.asarray(g, dtype=np.float64), -limit, limit)


def clamp_scales(qparams: dict[int, "LayerQuantParams"]) -> None:
    """Keep every learned scale positive after an optimizer step.

    Adam steps have magnitude ~lr regardless of the gradient, so a scale a few
    steps from zero can be driven through it; quantization needs s > 0."""
    for qp in qparams.values():
        arrays = ([qp.weight_scale] if qp.shared_weight_scale
                  else list(qp.weight_scales.values()))
        arrays.extend(qp.act_scales.values())
        for a in arrays:
            if float(a) < quant.SCALE_FLOOR:
                a[...] = quant.SCALE_FLOOR


def eta_factor(bits: int, highest: int) -> float:
    """Learning-rate attenuation for a width ``delta = highest - bits`` below
    the storage width: 10^(-delta/2) for even delta, 5 * 10^(-(delta+1)/2)
    for odd delta (exact decimals, e.g. 1, 0.1, 0.01 for 8/6/4 under h=8)."""
    delta = highest - bits
    if delta < 0:
        raise ConfigError(f"width {bits} exceeds storage width {highest}")
    if delta % 2 == 0:
        return 1.0 / 10.0 ** (delta // 2)
    return 5.0 / 10.0 ** ((delta + 1) // 2)


def alrs_lr(bits: int, lr: float, scale_grads, num_layers: int, highest: int,
            floor: float = 0.0) -> float:
    """Adaptive scale learning rate for one width's pass.

    ``scale_grads`` iterates per-quantized-layer gradient vectors (weight
    scale and this width's activation scale).  Each layer contributes
    min(max|clip(g)|, 1); their mean over ``num_layers`` is subtracted from
    the scheduled rate before the width attenuation, then floored.
    """
    vectors = list(scale_grads)
    if num_layers != len(vectors):
        raise ConfigError(f"expected {num_layers} per-layer gradients, got {len(vectors)}")
    if num_layers:
        term = sum(min(float(np.max(np.abs(clip_grad(g)))), 1.0) for g in vectors) / num_layers
    else:
        term = 0.0
    return max(eta_factor(bits, highest) * (lr - term), floor)


def named_parameters(net: Network) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i in net.trainable_indices:
        out[f"L{i}.weight"] = net.layers[i].weight
        out[f"L{i}.bias"] = net.layers[i].bias
    return out


def named_scales(qparams: dict[int, LayerQuantParams]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, qp in qparams.items():
        if qp.shared_weight_scale:
            out[f"L{i}.wscale"] = qp.weight_scale
        else:
            for b, s in qp.weight_scales.items():
                out[f"L{i}.wscale{b}"] = s
        for b, s in qp.act_scales.items():
            out[f"L{i}.xscale{b}"] = s
    return out


def _calibration_inputs(net: Network, cache, indices) -> dict[int, np.ndarray]:
    out = {}
    for e in cache.entries:
        if e.index in indices:
            if e.kind == "linear":
                out[e.index] = e.data["x_hat"]
            elif e.kind == "conv":
                p = net.layers[e.index].padding
                xp = e.data["xp"]
                out[e.index] = xp[:, :, p:-p, p:-p] if p else xp
    return out


def init_quant_params(net: Network, bits: BitWidthSet, calib_x, float_norm,
                      shared_weight_scale: bool = True) -> dict[int, LayerQuantParams]:
    """Step sizes from the pretrained weights, activation scales from one
    calibration batch run through the float model."""
    qparams: dict[int, LayerQuantParams] = {}
    for idx in net.quantized_indices:
        layer = net.layers[idx]
        qp = LayerQuantParams(
            highest_bits=bits.highest,
            weight_scale=quant.init_weight_scale_range(layer.weight, bits.highest),
            shared_weight_scale=shared_weight_scale,
        )
        if not shared_weight_scale:
            qp.weight_scales = {b: quant.init_weight_scale(layer.weight, b) for b in bits}
        qparams[idx] = qp
    _, cache = forward(net, calib_x, None, float_norm, training=False)
    inputs = _calibration_inputs(net, cache, set(qparams))
    for idx, qp in qparams.items():
        for b in bits:
            qp.act_scales[b] = quant.init_activation_scale(inputs[idx], b)
    return qparams


def train_float(net: Network, train_x, train_y, epochs: int, batch_size: int,
                lr: float, weight_decay: float, seed: int,
                bn_momentum: float = 0.1) -> dict[int, NormStats]:
    """Plain float training; returns the float batch-norm statistics, which
    seed the per-width statistics of the quantized phase."""
    stats = net.make_norm_stats(bn_momentum)
    opt = Adam(named_parameters(net), weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    n = train_x.shape[0]
    steps = max(1, math.ceil(n / batch_size))
    for epoch in range(epochs):
        step_lr = cosine_lr(lr, epoch, epochs)
        perm = rng.permutation(n)
        for s in range(steps):
            sel = perm[s * batch_size : (s + 1) * batch_size]
            logits, cache = forward(net, train_x[sel], None, stats, training=True)
            loss, _ = softmax_cross_entropy(logits, train_y[sel])
            if not math.isfinite(loss):
                raise NumericalError(f"float pretraining diverged at epoch {epoch}")
            grads = backward(net, cache, train_y[sel])
            named = {}
            for i, g in grads.weights.items():
                named[f"L{i}.weight"] = g
            for i, g in grads.biases.items():
                named[f"L{i}.bias"] = g
            opt.step(named, step_lr)
    return stats


def evaluate_uniform(state: ModelState, bits: int, x, y) -> float:
    """Accuracy with every quantized layer at the same width."""
    if bits not in state.bits:
        raise ConfigError(f"width {bits} not in the trained set {state.bits.bits}")
    ctx = QuantContext(
        bits={i: bits for i in state.net.quantized_indices},
        params=state.qparams,
        stored_ints=state.stored_ints,
    )
    logits, _ = forward(state.net, x, ctx, state.norm_for_uniform(bits), training=False)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def evaluate_float(net: Network, norm: dict[int, NormStats], x, y) -> float:
    logits, _ = forward(net, x, None, norm, training=False)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


class MultiPrecTrainer:
    """Joint trainer for one shared model evaluated at several widths."""

    def __init__(self, net: Network, cfg: TrainConfig,
                 qparams: dict[int, LayerQuantParams],
                 norm_per_bit: dict[int, dict[int, NormStats]], seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.state = ModelState(
            net=net, bits=cfg.bits, qparams=qparams, norm_per_bit=norm_per_bit,
            shared_weight_scale=cfg.shared_weight_scale,
        )
        self.opt_weights = Adam(named_parameters(net), weight_decay=cfg.weight_decay)
        self.opt_scales = Adam(named_scales(qparams), weight_decay=0.0)
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self.last_lambda: dict[int, float] = {}

    @classmethod
    def initialize(cls, net: Network, cfg: TrainConfig, calib_x,
                   float_norm: dict[int, NormStats], seed: int = 0) -> "MultiPrecTrainer":
        cfg.validate()
        qparams = init_quant_params(net, cfg.bits, calib_x, float_norm,
                                    cfg.shared_weight_scale)
        norm_per_bit = {
            b: {site: float_norm[site].copy() for site in net.norm_indices}
            for b in cfg.bits
        }
        return cls(net, cfg, qparams, norm_per_bit, seed)

    # -- single-batch steps ------------------------------------------------

    def _pass(self, x, y, bits: int):
        net = self.state.net
        ctx = QuantContext(
            bits={i: bits for i in net.quantized_indices},
            params=self.state.qparams,
        )
        logits, cache = forward(net, x, ctx, self.state.norm_per_bit[bits], training=True)
        loss, _ = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise NumericalError(f"loss diverged in the {bits}-bit pass")
        grads = backward(net, cache, y)
        return loss, grads

    def _named_weight_grads(self, grads: nn.Gradients) -> dict[str, np.ndarray]:
        named = {}
        for i, g in grads.weights.items():
            named[f"L{i}.weight"] = g
        for i, g in grads.biases.items():
            named[f"L{i}.bias"] = g
        return named

    def _named_scale_grads(self, grads: nn.Gradients) -> dict[str, float]:
        named = {}
        for i, g in grads.weight_scales.items():
            b = grads.bits_by_layer[i]
            qp = self.state.qparams[i]
            key = f"L{i}.wscale" if qp.shared_weight_scale else f"L{i}.wscale{b}"
            named[key] = g
        for i, g in grads.act_scales.items():
            named[f"L{i}.xscale{grads.bits_by_layer[i]}"] = g
        return named

    def _scale_grad_vectors(self, grads: nn.Gradients) -> dict[int, np.ndarray]:
        return {
            i: np.array([grads.weight_scales[i], grads.act_scales[i]])
            for i in sorted(grads.weight_scales)
        }

    def _record_scale_grads(self, recorder, bits: int, vectors: dict[int, np.ndarray]):
        if recorder is None:
            return
        for i, vec in vectors.items():
            max_abs = float(np.max(np.abs(clip_grad(vec)))) if vec.size else 0.0
            recorder.scale_grad(self.step_count, i, bits, max_abs)

    def _accumulate(self, x, y, recorder=None):
        """Conventional mode's gradient accumulation over every width."""
        w_total: dict[str, np.ndarray] = {}
        s_total: dict[str, float] = {}
        losses: dict[int, float] = {}
        for b in self.cfg.loop_bits:
            loss, grads = self._pass(x, y, b)
            losses[b] = loss
            for k, g in self._named_weight_grads(grads).items():
                w_total[k] = w_total.get(k, 0) + g
            for k, g in self._named_scale_grads(grads).items():
                s_total[k] = s_total.get(k, 0.0) + g
            self._record_scale_grads(recorder, b, self._scale_grad_vectors(grads))
        return losses, w_total, s_total

    def step_conventional(self, x, y, lr: float, recorder=None) -> dict[int, float]:
        losses, w_total, s_total = self._accumulate(x, y, recorder)
        self.opt_weights.step(w_total, lr)
        if s_total:
            self.opt_scales.step(s_total, lr)
            clamp_scales(self.state.qparams)
        for b in losses:
            self.last_lambda[b] = lr
        self.step_count += 1
        return losses

    def step_alrs(self, x, y, lr: float, recorder=None) -> dict[int, float]:
        losses: dict[int, float] = {}
        num_q = len(self.state.net.quantized_indices)
        for b in self.cfg.loop_bits:
            loss, grads = self._pass(x, y, b)
            losses[b] = loss
            vectors = self._scale_grad_vectors(grads)
            lam = alrs_lr(b, lr, vectors.values(), num_q, self.cfg.bits.highest,
                          self.cfg.alrs_floor)
            self.opt_weights.step(self._named_weight_grads(grads), lr)
            named_s = self._named_scale_grads(grads)
            if named_s:
                self.opt_scales.step(named_s, lam)
                clamp_scales(self.state.qparams)
            self.last_lambda[b] = lam
            self._record_scale_grads(recorder, b, vectors)
        self.step_count += 1
        return losses

    def step(self, x, y, lr: float, recorder=None) -> dict[int, float]:
        if self.cfg.mode == "alrs":
            return self.step_alrs(x, y, lr, recorder)
        return self.step_conventional(x, y, lr, recorder)

    # -- epoch loop ----------------------------------------------------------

    def evaluate(self, bits: int, x, y) -> float:
        return evaluate_uniform(self.state, bits, x, y)

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
                losses = self.step(train_x[sel], train_y[sel], lr, recorder)
                for b, v in losses.items():
                    sums[b] += v
            if recorder is not None:
                for b in cfg.bits:
                    acc = self.evaluate(b, eval_x, eval_y)
                    recorder.metric(epoch, b, sums[b] / steps, acc,
                                    self.last_lambda.get(b, lr))
