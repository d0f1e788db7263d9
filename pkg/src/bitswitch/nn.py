"""Small dense networks with hand-written backpropagation.

Tensors are plain numpy arrays (float32 in production paths; gradient-check
tests may build float64 copies, every op follows the input dtype).  The layer
family is fully-connected and 3x3 convolution blocks with ReLU, flatten and
per-feature batch normalization; networks end in softmax cross-entropy.

Batch-norm running statistics live *outside* the layers (``NormStats``), so a
trainer can keep one set per precision, or one per (producer bit, own bit)
edge, and select which set a forward pass reads and updates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, StaleCacheError
from . import quant
from .quant import LayerQuantParams

BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "fully-connected" | "conv2d" | "relu" | "flatten" | "batch-norm"
    fan_in: int = 0
    fan_out: int = 0
    quantized: bool = False


@dataclass
class NormStats:
    """Per-feature running mean/variance for one batch-norm site."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, features: int, momentum: float = 0.1) -> "NormStats":
        return cls(
            mean=np.zeros(features, dtype=np.float32),
            var=np.ones(features, dtype=np.float32),
            momentum=momentum,
        )

    def copy(self) -> "NormStats":
        return NormStats(self.mean.copy(), self.var.copy(), self.momentum)


@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    quantized: bool = False

    @property
    def spec(self) -> LayerSpec:
        out, inp = self.weight.shape
        return LayerSpec("fully-connected", inp, out, self.quantized)


@dataclass
class Conv2d:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray
    padding: int = 1
    quantized: bool = False

    @property
    def spec(self) -> LayerSpec:
        o, c, kh, kw = self.weight.shape
        return LayerSpec("conv2d", c * kh * kw, o * kh * kw, self.quantized)


@dataclass
class ReLU:
    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("relu")


@dataclass
class Flatten:
    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("flatten")


@dataclass
class BatchNorm:
    features: int

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("batch-norm", self.features, self.features)


TRAINABLE = (Linear, Conv2d)


@dataclass
class Network:
    layers: list

    def __post_init__(self):
        trainable = self.trainable_indices
        if not trainable:
            raise DimensionError("network has no trainable layers")
        first, last = trainable[0], trainable[-1]
        for idx in (first, last):
            if self.layers[idx].quantized:
                raise DimensionError(
                    f"layer {idx} is first or last trainable and must stay full precision"
                )

    @property
    def trainable_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, TRAINABLE)]

    @property
    def quantized_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, TRAINABLE) and l.quantized]

    @property
    def norm_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    def specs(self) -> list[LayerSpec]:
        return [l.spec for l in self.layers]

    def make_norm_stats(self, momentum: float = 0.1) -> dict[int, NormStats]:
        return {
            i: NormStats.create(self.layers[i].features, momentum)
            for i in self.norm_indices
        }

    def copy(self) -> "Network":
        """Independent network with copied parameter arrays."""
        out = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                out.append(Linear(layer.weight.copy(), layer.bias.copy(), layer.quantized))
            elif isinstance(layer, Conv2d):
                out.append(Conv2d(layer.weight.copy(), layer.bias.copy(),
                                  layer.padding, layer.quantized))
            elif isinstance(layer, BatchNorm):
                out.append(BatchNorm(layer.features))
            elif isinstance(layer, ReLU):
                out.append(ReLU())
            else:
                out.append(Flatten())
        return Network(out)


def _kaiming_uniform(shape, fan_in, rng, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def mlp(dims, rng, dtype=np.float32) -> Network:
    """Stack of fully-connected blocks; middle layers quantized, batch-norm
    and ReLU between them, first and last kept full precision."""
    if len(dims) < 3:
        raise DimensionError("an MLP needs at least input, hidden and output dims")
    count = len(dims) - 1
    layers: list = []
    for i in range(count):
        inp, out = dims[i], dims[i + 1]
        q = 0 < i < count - 1
        layers.append(
            Linear(
                weight=_kaiming_uniform((out, inp), inp, rng, dtype),
                bias=np.zeros(out, dtype=dtype),
                quantized=q,
            )
        )
        if i < count - 1:
            if q:
                layers.append(BatchNorm(out))
            layers.append(ReLU())
    return Network(layers)


def conv_net(in_shape, channels, classes, rng, dtype=np.float32) -> Network:
    """Small conv stack: full-precision stem, quantized 3x3 middle blocks with
    batch-norm, flatten, full-precision classifier head."""
    c, h, w = in_shape
    if len(channels) < 2:
        raise DimensionError("conv net needs at least a stem and one middle block")
    layers: list = []
    prev = c
    for i, ch in enumerate(channels):
        fan_in = prev * 9
        layers.append(
            Conv2d(
                weight=_kaiming_uniform((ch, prev, 3, 3), fan_in, rng, dtype),
                bias=np.zeros(ch, dtype=dtype),
                padding=1,
                quantized=i > 0,
            )
        )
        if i > 0:
            layers.append(BatchNorm(ch))
        layers.append(ReLU())
        prev = ch
    layers.append(Flatten())
    feat = prev * h * w
    layers.append(
        Linear(
            weight=_kaiming_uniform((classes, feat), feat, rng, dtype),
            bias=np.zeros(classes, dtype=dtype),
            quantized=False,
        )
    )
    return Network(layers)


@dataclass
class QuantContext:
    """Which width each quantized layer runs at in this pass, plus its
    learned parameters.  ``stored_ints`` supplies pre-quantized highest-width
    integers (loaded checkpoints) so evaluation never re-rounds float masters."""

    bits: dict[int, int]
    params: dict[int, LayerQuantParams]
    stored_ints: Optional[dict[int, np.ndarray]] = None


@dataclass
class _LayerCache:
    index: int
    kind: str
    data: dict = field(default_factory=dict)


@dataclass
class ForwardCache:
    entries: list[_LayerCache]
    logits: np.ndarray
    batch: int
    consumed: bool = False


def norm_apply(x, stats: NormStats, training: bool):
    """Normalize per feature; training mode uses batch statistics and folds
    them into the running estimates with the stats' momentum."""
    x = np.asarray(x)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch-norm input must be 2-D or 4-D, got {x.ndim}-D")
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = stats.momentum
        stats.mean[...] = (1.0 - m) * stats.mean + m * mean
        stats.var[...] = (1.0 - m) * stats.var + m * var
    else:
        mean = stats.mean.astype(x.dtype) if x.dtype != stats.mean.dtype else stats.mean
        var = stats.var.astype(x.dtype) if x.dtype != stats.var.dtype else stats.var
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xn = (x - mean.reshape(shape)) * inv.reshape(shape)
    cache = {"xn": xn, "inv": inv.reshape(shape), "axes": axes, "training": training}
    return xn, cache


def _conv2d(x, weight, bias, padding):
    n, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise DimensionError(f"conv expects {c2} input channels, got {c}")
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = h + 2 * p - kh + 1
    wo = w + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv kernel larger than padded input")
    y = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + ho, v : v + wo]
            y += np.einsum("nchw,oc->nohw", patch, weight[:, :, u, v], optimize=True)
    return y + bias.reshape(1, -1, 1, 1), xp


def _conv2d_backward(dout, xp, weight, padding):
    n, o, ho, wo = dout.shape
    _, c, kh, kw = weight.shape
    dw = np.zeros_like(weight)
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + ho, v : v + wo]
            dw[:, :, u, v] = np.einsum("nohw,nchw->oc", dout, patch, optimize=True)
            dxp[:, :, u : u + ho, v : v + wo] += np.einsum(
                "nohw,oc->nchw", dout, weight[:, :, u, v], optimize=True
            )
    db = dout.sum(axis=(0, 2, 3))
    p = padding
    dx = dxp[:, :, p:-p, p:-p] if p else dxp
    return dw, db, dx


def _quantized_weights(layer, idx, ctx: QuantContext):
    bits = ctx.bits[idx]
    params = ctx.params[idx]
    if ctx.stored_ints is not None and idx in ctx.stored_ints:
        high = quant.QuantizedTensor(ctx.stored_ints[idx], params.highest_bits, signed=True)
        low = quant.double_round_low(high, bits)
        w_hat = quant.dequantize_low(low, params).reshape(layer.weight.shape)
        return w_hat, None, None, bits
    if params.shared_weight_scale:
        w_hat, mask, g = quant.weight_forward_shared(layer.weight, params, bits)
    else:
        w_hat, mask, g = quant.weight_forward_unshared(layer.weight, params, bits)
    return w_hat, mask, g, bits


def forward(net: Network, x, quant_ctx: Optional[QuantContext] = None,
            norm_ctx: Optional[dict[int, NormStats]] = None, training: bool = False):
    """Run the network, returning ``(logits, cache)``.

    ``quant_ctx=None`` is the pure float path.  ``norm_ctx`` maps batch-norm
    layer indices to the NormStats each site should read (and, in training
    mode, update) during this pass.
    """
    x = np.asarray(x)
    entries: list[_LayerCache] = []
    first = net.layers[net.trainable_indices[0]]
    if isinstance(first, Linear):
        if x.ndim != 2 or x.shape[1] != first.weight.shape[1]:
            raise DimensionError(
                f"expected input of shape (batch, {first.weight.shape[1]}), got {x.shape}"
            )
    elif isinstance(first, Conv2d):
        if x.ndim != 4 or x.shape[1] != first.weight.shape[1]:
            raise DimensionError(
                f"expected input of shape (batch, {first.weight.shape[1]}, H, W), got {x.shape}"
            )
    batch = x.shape[0]

    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Linear):
            cache = _LayerCache(idx, "linear")
            if layer.quantized and quant_ctx is not None:
                params = quant_ctx.params[idx]
                bits = quant_ctx.bits[idx]
                x_hat, mask_x, g_x = quant.activation_forward(x, params, bits)
                w_hat, mask_w, g_w, _ = _quantized_weights(layer, idx, quant_ctx)
                cache.data.update(
                    x_hat=x_hat, w_hat=w_hat, mask_w=mask_w, g_w=g_w,
                    mask_x=mask_x, g_x=g_x, bits=bits,
                )
                x = x_hat @ w_hat.T + layer.bias
            else:
                cache.data.update(x_hat=x, w_hat=layer.weight)
                x = x @ layer.weight.T + layer.bias
            entries.append(cache)
        elif isinstance(layer, Conv2d):
            cache = _LayerCache(idx, "conv")
            if layer.quantized and quant_ctx is not None:
                params = quant_ctx.params[idx]
                bits = quant_ctx.bits[idx]
                x_hat, mask_x, g_x = quant.activation_forward(x, params, bits)
                w_hat, mask_w, g_w, _ = _quantized_weights(layer, idx, quant_ctx)
                y, xp = _conv2d(x_hat, w_hat, layer.bias, layer.padding)
                cache.data.update(
                    xp=xp, w_hat=w_hat, mask_w=mask_w, g_w=g_w,
                    mask_x=mask_x, g_x=g_x, bits=bits,
                )
            else:
                y, xp = _conv2d(x, layer.weight, layer.bias, layer.padding)
                cache.data.update(xp=xp, w_hat=layer.weight)
            entries.append(cache)
            x = y
        elif isinstance(layer, ReLU):
            mask = x > 0
            entries.append(_LayerCache(idx, "relu", {"mask": mask}))
            x = x * mask
        elif isinstance(layer, Flatten):
            entries.append(_LayerCache(idx, "flatten", {"shape": x.shape}))
            x = x.reshape(batch, -1)
        elif isinstance(layer, BatchNorm):
            if norm_ctx is None or idx not in norm_ctx:
                raise DimensionError(f"no norm statistics supplied for layer {idx}")
            x, bn_cache = norm_apply(x, norm_ctx[idx], training)
            entries.append(_LayerCache(idx, "batch-norm", bn_cache))
        else:  # pragma: no cover - layer kinds are closed
            raise DimensionError(f"unknown layer kind {type(layer).__name__}")

    if x.ndim != 2:
        raise DimensionError(f"network output must be (batch, classes), got shape {x.shape}")
    return x, ForwardCache(entries, logits=x, batch=batch)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood; returns ``(loss, probabilities)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    return loss, np.exp(logp)


@dataclass
class Gradients:
    """Parameter and scale gradients from one backward pass."""

    weights: dict[int, np.ndarray] = field(default_factory=dict)
    biases: dict[int, np.ndarray] = field(default_factory=dict)
    weight_scales: dict[int, float] = field(default_factory=dict)
    act_scales: dict[int, float] = field(default_factory=dict)
    bits_by_layer: dict[int, int] = field(default_factory=dict)


def backward(net: Network, cache: ForwardCache, labels) -> Gradients:
    """Backpropagate softmax cross-entropy through the cached pass."""
    labels = np.asarray(labels)
    if cache.consumed:
        raise StaleCacheError("forward cache already consumed by a backward pass")
    if labels.shape[0] != cache.batch:
        raise StaleCacheError(
            f"cache built for batch of {cache.batch}, labels have {labels.shape[0]}"
        )
    cache.consumed = True

    n = cache.batch
    _, probs = softmax_cross_entropy(cache.logits, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    dout = (probs - onehot) / n

    grads = Gradients()
    for entry in reversed(cache.entries):
        layer = net.layers[entry.index]
        d = entry.data
        if entry.kind == "linear":
            dw_hat = dout.T @ d["x_hat"]
            db = dout.sum(axis=0)
            dx = dout @ d["w_hat"]
            if "mask_w" in d:
                if d["mask_w"] is None:
                    raise StaleCacheError("cannot backpropagate through stored-integer weights")
                grads.weights[entry.index] = quant.ste_weight_grad_passthrough(dw_hat, d["mask_w"])
                grads.weight_scales[entry.index] = float(np.sum(dw_hat * d["g_w"]))
                grads.act_scales[entry.index] = float(np.sum(dx * d["g_x"]))
                grads.bits_by_layer[entry.index] = d["bits"]
                dx = dx * d["mask_x"]
            else:
                grads.weights[entry.index] = dw_hat
            grads.biases[entry.index] = db
            dout = dx
        elif entry.kind == "conv":
            dw_hat, db, dx = _conv2d_backward(dout, d["xp"], d["w_hat"], layer.padding)
            if "mask_w" in d:
                if d["mask_w"] is None:
                    raise StaleCacheError("cannot backpropagate through stored-integer weights")
                grads.weights[entry.index] = quant.ste_weight_grad_passthrough(dw_hat, d["mask_w"])
                grads.weight_scales[entry.index] = float(np.sum(dw_hat * d["g_w"]))
                grads.act_scales[entry.index] = float(np.sum(dx * d["g_x"]))
                grads.bits_by_layer[entry.index] = d["bits"]
                dx = dx * d["mask_x"]
            else:
                grads.weights[entry.index] = dw_hat
            grads.biases[entry.index] = db
            dout = dx
        elif entry.kind == "relu":
            dout = dout * d["mask"]
        elif entry.kind == "flatten":
            dout = dout.reshape(d["shape"])
        elif entry.kind == "batch-norm":
            xn, inv, axes = d["xn"], d["inv"], d["axes"]
            if d["training"]:
                m = 1
                for ax in axes:
                    m *= xn.shape[ax]
                sum_d = dout.sum(axis=axes, keepdims=True)
                sum_dx = (dout * xn).sum(axis=axes, keepdims=True)
                dout = (inv / m) * (m * dout - sum_d - xn * sum_dx)
            else:
                dout = dout * inv
    return grads
