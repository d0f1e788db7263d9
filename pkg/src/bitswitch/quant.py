"""Uniform integer quantizers with a two-stage rounding path.

Weights are quantized once to the highest candidate width h and stored as
integers; every lower width l is derived from those integers by dividing by
2^(h-l) and rounding again, in pure integer arithmetic.  Dequantization
multiplies the low-width integers back by scale * 2^(h-l), so the low-width
grid is exactly contained in the high-width one and switching widths never
touches the float weights.

Activations are quantized unsigned in a single stage with one learned scale
per width.  Scale gradients use the clipped straight-through closed forms:
inside the clip range the derivative is round(v) - v, outside it is the bound
that did the clipping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BitWidthSet",
    "QuantizedTensor",
    "LayerQuantParams",
    "round_half_away",
    "int_range",
    "quantize_uniform",
    "quantize_weight_high",
    "double_round_low",
    "dequantize_low",
    "quantize_activation",
    "ste_scale_elements",
    "ste_scale_grad",
    "ste_zeropoint_grad",
    "ste_weight_grad_passthrough",
    "init_weight_scale",
    "init_activation_scale",
    "weight_forward_shared",
    "weight_forward_unshared",
    "activation_forward",
]

SCALE_FLOOR = 1e-8


def round_half_away(x):
    """Round to the nearest integer with ties going away from zero."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def int_range(bits: int, signed: bool) -> tuple[int, int]:
    """Inclusive integer range representable at the given width."""
    if bits < 1:
        raise ValueError(f"bit width must be >= 1, got {bits}")
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass(frozen=True)
class BitWidthSet:
    """Candidate precisions, strictly decreasing; the first entry is the
    storage width that every lower width is derived from."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        object.__setattr__(self, "bits", bits)
        if not bits:
            raise ValueError("empty bit-width set")
        if any(b < 2 or b > 8 for b in bits):
            raise ValueError(f"bit widths must lie in [2, 8], got {bits}")
        if any(a <= b for a, b in zip(bits, bits[1:])):
            raise ValueError(f"bit widths must be strictly decreasing, got {bits}")

    @property
    def highest(self) -> int:
        return self.bits[0]

    def __iter__(self):
        return iter(self.bits)

    def __len__(self):
        return len(self.bits)

    def __contains__(self, b) -> bool:
        return b in self.bits


@dataclass
class QuantizedTensor:
    """Integer tensor tagged with its width and signedness."""

    values: np.ndarray
    bits: int
    signed: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.issubdtype(self.values.dtype, np.integer):
            raise TypeError(f"quantized values must be integers, got {self.values.dtype}")
        lo, hi = int_range(self.bits, self.signed)
        if self.values.size and (self.values.min() < lo or self.values.max() > hi):
            raise ValueError(
                f"values outside the {self.bits}-bit range [{lo}, {hi}]"
            )

    @property
    def range(self) -> tuple[int, int]:
        return int_range(self.bits, self.signed)


def _scale_value(scale) -> float:
    s = float(np.asarray(scale))
    if not math.isfinite(s) or s <= 0.0:
        raise ValueError(f"quantization scale must be finite and > 0, got {s}")
    return s


@dataclass
class LayerQuantParams:
    """Learned quantization state of one layer.

    ``weight_scale`` is shared by every width when ``shared_weight_scale`` is
    true (low widths reuse the stored high-width integers); otherwise each
    width in ``weight_scales`` quantizes the float weights independently.
    Scales are 0-d float32 arrays so optimizer updates keep serialized and
    in-memory values bit-identical.
    """

    highest_bits: int
    weight_scale: np.ndarray
    act_scales: dict[int, np.ndarray] = field(default_factory=dict)
    weight_zero_point: int = 0
    act_zero_points: dict[int, int] = field(default_factory=dict)
    shared_weight_scale: bool = True
    weight_scales: dict[int, np.ndarray] = field(default_factory=dict)

    def act_zero(self, bits: int) -> int:
        return self.act_zero_points.get(bits, 0)

    def scale_for(self, bits: int) -> np.ndarray:
        if self.shared_weight_scale:
            return self.weight_scale
        return self.weight_scales[bits]


def _as_scale_array(value) -> np.ndarray:
    return np.asarray(np.float32(max(float(value), SCALE_FLOOR)))


def quantize_uniform(y, scale, zero_point: int, bits: int, signed: bool):
    """Single-stage uniform quantizer.

    Returns ``(q, y_hat, mask)`` where ``q`` holds the clipped integers
    round(y/scale) + zero_point, ``y_hat = (q - zero_point) * scale`` is the
    dequantized value and ``mask`` flags elements whose ratio fell inside the
    clip range (used for the pass-through weight gradient).
    """
    s = _scale_value(scale)
    y = np.asarray(y)
    lo, hi = int_range(bits, signed)
    v = y / s + float(zero_point)
    mask = (v >= lo) & (v <= hi)
    q = np.clip(round_half_away(v), lo, hi).astype(np.int32)
    dtype = y.dtype if y.dtype.kind == "f" else np.dtype(np.float32)
    y_hat = (q - zero_point).astype(dtype) * np.asarray(scale, dtype=dtype)
    return QuantizedTensor(q, bits, signed), y_hat, mask


def quantize_weight_high(weights, params: LayerQuantParams) -> QuantizedTensor:
    """Quantize float weights to the highest width's signed integer grid."""
    s = _scale_value(params.weight_scale)
    lo, hi = int_range(params.highest_bits, signed=True)
    v = (np.asarray(weights) - params.weight_zero_point) / s
    q = np.clip(round_half_away(v), lo, hi).astype(np.int8)
    return QuantizedTensor(q, params.highest_bits, signed=True)


def double_round_low(high: QuantizedTensor, low_bits: int, method: str = "shift") -> QuantizedTensor:
    """Derive a low-width integer tensor from stored high-width integers.

    The division by 2^(h-l) rounds half away from zero.  ``method="shift"``
    (production path) uses only integer adds and shifts; ``method="float"``
    exists so the two can be compared exhaustively.
    """
    if low_bits > high.bits:
        raise ValueError(f"cannot derive {low_bits}-bit from {high.bits}-bit storage")
    if not high.signed:
        raise ValueError("two-stage rounding applies to signed weight tensors")
    delta = high.bits - low_bits
    vals = high.values.astype(np.int32)
    if delta == 0:
        shifted = vals
    elif method == "shift":
        offset = 1 << (delta - 1)
        mag = (np.abs(vals) + offset) >> delta
        shifted = np.where(vals < 0, -mag, mag)
    elif method == "float":
        shifted = round_half_away(vals / float(1 << delta)).astype(np.int32)
    else:
        raise ValueError(f"unknown method {method!r}")
    lo, hi = int_range(low_bits, signed=True)
    q = np.clip(shifted, lo, hi).astype(np.int8)
    return QuantizedTensor(q, low_bits, signed=True)


def dequantize_low(low: QuantizedTensor, params: LayerQuantParams, dtype=np.float32) -> np.ndarray:
    """Map low-width integers back to float: q * scale * 2^(h-l) + zero."""
    delta = params.highest_bits - low.bits
    if delta < 0:
        raise ValueError(f"{low.bits}-bit tensor wider than storage width {params.highest_bits}")
    dtype = np.dtype(dtype)
    step = np.asarray(params.weight_scale, dtype=dtype) * np.asarray(1 << delta, dtype=dtype)
    return low.values.astype(dtype) * step + np.asarray(params.weight_zero_point, dtype=dtype)


def quantize_activation(x, bits: int, scale, zero_point: int = 0):
    """Unsigned single-stage activation quantizer.

    Returns ``(q, x_hat)`` with q = clip(round((x - z)/s), 0, 2^b - 1) and
    x_hat = q * s + z.
    """
    s = _scale_value(scale)
    x = np.asarray(x)
    lo, hi = int_range(bits, signed=False)
    v = (x - zero_point) / s
    q = np.clip(round_half_away(v), lo, hi).astype(np.int32)
    dtype = np.dtype(x.dtype if x.dtype.kind == "f" else np.float32)
    x_hat = q.astype(dtype) * np.asarray(scale, dtype=dtype) + np.asarray(zero_point, dtype=dtype)
    return QuantizedTensor(q, bits, signed=False), x_hat


def ste_scale_elements(y, scale, zero_point, lo: int, hi: int) -> np.ndarray:
    """Per-element derivative of the dequantized output w.r.t. the scale.

    round(v) - v strictly inside (lo, hi); the clipping bound outside.
    """
    v = (np.asarray(y) - zero_point) / _scale_value(scale)
    inside = (v > lo) & (v < hi)
    return np.where(inside, round_half_away(v) - v, np.clip(v, lo, hi))


def ste_scale_grad(y, scale, zero_point, lo: int, hi: int, upstream) -> float:
    """Scalar loss gradient for a learned scale: sum(upstream * element rule)."""
    g = ste_scale_elements(y, scale, zero_point, lo, hi)
    return float(np.sum(np.asarray(upstream) * g))


def ste_zeropoint_grad(y, scale, zero_point, lo: int, hi: int, upstream) -> float:
    """Zero-point gradient: 0 inside the clip range, 1 outside."""
    v = (np.asarray(y) - zero_point) / _scale_value(scale)
    inside = (v > lo) & (v < hi)
    return float(np.sum(np.asarray(upstream) * np.where(inside, 0.0, 1.0)))


def ste_weight_grad_passthrough(upstream, mask) -> np.ndarray:
    """Clipped straight-through estimator: upstream where unclipped, else 0."""
    return np.asarray(upstream) * mask


def init_weight_scale(weights, bits: int) -> np.ndarray:
    """Step-size init from the mean magnitude, as a 0-d float32 array."""
    mean_abs = float(np.mean(np.abs(weights)))
    return _as_scale_array(2.0 * mean_abs / math.sqrt(2 ** (bits - 1) - 1))


def init_weight_scale_range(weights, bits: int) -> np.ndarray:
    """Range-filling step-size init: the largest magnitude lands on the top
    integer.  Required for a shared scale, where low widths are derived from
    the stored integers by shifting — if the integers only occupy a sliver of
    the signed range, every derived low-width value collapses to zero."""
    top = 2 ** (bits - 1) - 1
    return _as_scale_array(float(np.max(np.abs(weights))) / top)


def init_activation_scale(x, bits: int) -> np.ndarray:
    """Calibration init: spread the observed max over the unsigned grid."""
    hi = (1 << bits) - 1
    return _as_scale_array(float(np.max(x)) / hi if np.size(x) else SCALE_FLOOR)


def weight_forward_shared(weights, params: LayerQuantParams, bits: int):
    """Fake-quantized weights at ``bits`` through the two-stage path.

    Returns ``(w_hat, mask, scale_elems)``: the dequantized weights, the
    pass-through mask (unclipped at both stages), and the per-element factors
    for the shared scale's gradient (highest-width rule).
    """
    s = _scale_value(params.weight_scale)
    lo_h, hi_h = int_range(params.highest_bits, signed=True)
    w = np.asarray(weights)
    v = (w - params.weight_zero_point) / s
    mask = (v >= lo_h) & (v <= hi_h)
    high = quantize_weight_high(w, params)
    low = double_round_low(high, bits)
    if bits < params.highest_bits:
        delta = params.highest_bits - bits
        lo_l, hi_l = int_range(bits, signed=True)
        off = 1 << (delta - 1)
        mag = (np.abs(high.values.astype(np.int32)) + off) >> delta
        second = np.where(high.values < 0, -mag, mag)
        mask = mask & (second >= lo_l) & (second <= hi_l)
    g = ste_scale_elements(w, s, params.weight_zero_point, lo_h, hi_h)
    return dequantize_low(low, params, dtype=w.dtype if w.dtype.kind == "f" else np.float32), mask, g


def weight_forward_unshared(weights, params: LayerQuantParams, bits: int):
    """Fake-quantized weights with an independent scale for this width."""
    scale = params.weight_scales[bits]
    q, w_hat, mask = quantize_uniform(weights, scale, params.weight_zero_point, bits, signed=True)
    lo, hi = int_range(bits, signed=True)
    g = ste_scale_elements(weights, scale, params.weight_zero_point, lo, hi)
    return w_hat, mask, g


def activation_forward(x, params: LayerQuantParams, bits: int):
    """Fake-quantized activations plus mask and scale-gradient factors."""
    scale = params.act_scales[bits]
    zero = params.act_zero(bits)
    lo, hi = int_range(bits, signed=False)
    _, x_hat = quantize_activation(x, bits, scale, zero)
    v = (np.asarray(x) - zero) / _scale_value(scale)
    mask = (v >= lo) & (v <= hi)
    g = ste_scale_elements(x, scale, zero, lo, hi)
    return x_hat, mask, g
