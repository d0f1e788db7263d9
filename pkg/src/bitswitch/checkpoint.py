"""Binary model storage with highest-width integer weights.

Shared-scale models store each quantized layer as signed bytes on the
highest-width grid plus one float32 scale; any lower width is rebuilt from
those integers alone, so a reloaded model evaluates bit-identically to the
training-time model at every width.  Unshared models store float32 weights
with one scale per width instead (the 32-bit storage mode).

Layout (all integers little-endian):

  magic "DRQ1" | mode u8 (0 shared, 1 unshared) | highest u8
  stats_kind u8 (0 per-width, 1 per-edge) | bit_count u8 | bits u8...
  layer_count u32, then one record per layer in network order:
    name u32+utf8 | kind u8 (0 linear, 1 conv, 2 relu, 3 flatten, 4 norm)
    linear/conv: quantized u8, padding u8, ndim u8, dims u32...,
                 weights (int8 if quantized+shared else f32),
                 bias count u32 + f32...,
                 quantized only: weight scale entries (bit u8, scale f32,
                 zero i32; single entry when shared) and activation entries
                 (bit u8, scale f32, zero i32)
    norm: features u32, momentum f32, entry_count u32,
          entries (producer u8, current u8, mean f32 x features, var ...)

Writes go to a temp file in the target directory and are renamed into place.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import CheckpointError
from .nn import BatchNorm, Conv2d, Flatten, Linear, Network, NormStats, ReLU
from .quant import BitWidthSet, LayerQuantParams, quantize_weight_high
from .state import ModelState

MAGIC = b"DRQ1"
KIND_LINEAR, KIND_CONV, KIND_RELU, KIND_FLATTEN, KIND_NORM = range(5)


def _f32(value) -> bytes:
    return struct.pack("<f", float(np.float32(value)))


def _scale_entry(bit: int, scale, zero: int) -> bytes:
    return struct.pack("<B", bit) + _f32(scale) + struct.pack("<i", zero)


def _array_f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _weight_record(layer, idx: int, state: ModelState, shared: bool) -> bytes:
    out = bytearray()
    quantized = layer.quantized and idx in state.qparams
    out += struct.pack("<BB", int(quantized), getattr(layer, "padding", 0))
    shape = layer.weight.shape
    out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    if quantized and shared:
        qp = state.qparams[idx]
        if state.stored_ints is not None and idx in state.stored_ints:
            ints = np.asarray(state.stored_ints[idx], dtype=np.int8)
        else:
            ints = quantize_weight_high(layer.weight, qp).values
        out += ints.astype("<i1").tobytes()
    else:
        out += _array_f32(layer.weight)
    out += struct.pack("<I", layer.bias.size) + _array_f32(layer.bias)
    if quantized:
        qp = state.qparams[idx]
        if shared:
            out += struct.pack("<B", 1)
            out += _scale_entry(qp.highest_bits, qp.weight_scale, qp.weight_zero_point)
        else:
            items = sorted(qp.weight_scales.items(), reverse=True)
            out += struct.pack("<B", len(items))
            for b, s in items:
                out += _scale_entry(b, s, qp.weight_zero_point)
        acts = sorted(qp.act_scales.items(), reverse=True)
        out += struct.pack("<B", len(acts))
        for b, s in acts:
            out += _scale_entry(b, s, qp.act_zero(b))
    return bytes(out)


def _norm_record(features: int, entries: dict, momentum: float) -> bytes:
    out = bytearray()
    out += struct.pack("<I", features) + _f32(momentum)
    keys = sorted(entries)
    out += struct.pack("<I", len(keys))
    for key in keys:
        stats = entries[key]
        producer, current = key
        out += struct.pack("<BB", producer, current)
        out += _array_f32(stats.mean) + _array_f32(stats.var)
    return bytes(out)


def _site_entries(state: ModelState, site: int) -> tuple[dict, float]:
    if state.norm_edges is not None:
        table = state.norm_edges[site]
        momentum = next(iter(table.values())).momentum
        return dict(table), momentum
    assert state.norm_per_bit is not None
    entries = {(b, b): state.norm_per_bit[b][site] for b in state.bits}
    momentum = next(iter(entries.values())).momentum
    return entries, momentum


def store(state: ModelState, path: str) -> None:
    """Serialize atomically; storage mode follows the state's scale sharing."""
    shared = state.shared_weight_scale
    out = bytearray()
    out += MAGIC
    out += struct.pack("<BBB", 0 if shared else 1, state.bits.highest,
                       1 if state.mixed else 0)
    out += struct.pack("<B", len(state.bits)) + bytes(state.bits.bits)
    out += struct.pack("<I", len(state.net.layers))
    for idx, layer in enumerate(state.net.layers):
        name = f"L{idx}".encode()
        out += struct.pack("<I", len(name)) + name
        if isinstance(layer, Linear):
            out += struct.pack("<B", KIND_LINEAR)
            out += _weight_record(layer, idx, state, shared)
        elif isinstance(layer, Conv2d):
            out += struct.pack("<B", KIND_CONV)
            out += _weight_record(layer, idx, state, shared)
        elif isinstance(layer, ReLU):
            out += struct.pack("<B", KIND_RELU)
        elif isinstance(layer, Flatten):
            out += struct.pack("<B", KIND_FLATTEN)
        elif isinstance(layer, BatchNorm):
            out += struct.pack("<B", KIND_NORM)
            entries, momentum = _site_entries(state, idx)
            out += _norm_record(layer.features, entries, momentum)
        else:  # pragma: no cover
            raise CheckpointError(f"cannot serialize layer kind {type(layer).__name__}")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(out))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()


def _read_scale_entries(cur: _Cursor) -> list[tuple[int, float, int]]:
    (count,) = cur.unpack("<B")
    out = []
    for _ in range(count):
        bit, scale, zero = cur.unpack("<Bfi")
        out.append((bit, scale, zero))
    return out


def load(path: str) -> ModelState:
    """Rebuild a ModelState; shared-mode integer weights are retained so
    lower widths derive from them exactly as at training time."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    if cur.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
    mode, highest, stats_kind = cur.unpack("<BBB")
    if mode not in (0, 1) or stats_kind not in (0, 1):
        raise CheckpointError(f"unknown mode/stats byte ({mode}, {stats_kind})")
    (bit_count,) = cur.unpack("<B")
    bits = BitWidthSet(tuple(cur.take(bit_count)))
    if bits.highest != highest:
        raise CheckpointError(f"storage width {highest} disagrees with bit set {bits.bits}")
    (layer_count,) = cur.unpack("<I")
    shared = mode == 0

    layers: list = []
    qparams: dict[int, LayerQuantParams] = {}
    stored_ints: dict[int, np.ndarray] = {}
    norm_tables: dict[int, dict] = {}
    momenta: dict[int, float] = {}
    for idx in range(layer_count):
        (name_len,) = cur.unpack("<I")
        cur.take(name_len)  # names are positional, content informative only
        (kind,) = cur.unpack("<B")
        if kind in (KIND_LINEAR, KIND_CONV):
            quantized, padding = cur.unpack("<BB")
            (ndim,) = cur.unpack("<B")
            shape = cur.unpack(f"<{ndim}I")
            numel = int(np.prod(shape))
            qp = None
            if quantized and shared:
                ints = cur.array("<i1", numel).reshape(shape)
                stored_ints[idx] = ints
                weight = None  # filled in after scales are read
            else:
                weight = cur.array("<f4", numel).reshape(shape).astype(np.float32)
            (bias_count,) = cur.unpack("<I")
            bias = cur.array("<f4", bias_count).astype(np.float32)
            if quantized:
                w_entries = _read_scale_entries(cur)
                a_entries = _read_scale_entries(cur)
                qp = LayerQuantParams(
                    highest_bits=highest,
                    weight_scale=np.asarray(np.float32(w_entries[0][1])),
                    shared_weight_scale=shared,
                    weight_zero_point=w_entries[0][2],
                )
                if not shared:
                    qp.weight_scales = {
                        b: np.asarray(np.float32(s)) for b, s, _ in w_entries
                    }
                qp.act_scales = {b: np.asarray(np.float32(s)) for b, s, _ in a_entries}
                qp.act_zero_points = {b: z for b, _, z in a_entries}
                qparams[idx] = qp
                if weight is None:
                    weight = (
                        stored_ints[idx].astype(np.float32)
                        * np.float32(qp.weight_scale)
                        + np.float32(qp.weight_zero_point)
                    )
            if kind == KIND_LINEAR:
                layers.append(Linear(weight=weight, bias=bias, quantized=bool(quantized)))
            else:
                layers.append(Conv2d(weight=weight, bias=bias, padding=padding,
                                     quantized=bool(quantized)))
        elif kind == KIND_RELU:
            layers.append(ReLU())
        elif kind == KIND_FLATTEN:
            layers.append(Flatten())
        elif kind == KIND_NORM:
            (features,) = cur.unpack("<I")
            (momentum,) = cur.unpack("<f")
            (entry_count,) = cur.unpack("<I")
            table = {}
            for _ in range(entry_count):
                producer, current = cur.unpack("<BB")
                mean = cur.array("<f4", features)
                var = cur.array("<f4", features)
                table[(producer, current)] = NormStats(mean, var, float(momentum))
            layers.append(BatchNorm(features))
            norm_tables[idx] = table
            momenta[idx] = float(momentum)
        else:
            raise CheckpointError(f"unknown layer kind byte {kind} in record {idx}")
    if cur.pos != len(cur.data):
        raise CheckpointError(f"{len(cur.data) - cur.pos} trailing bytes after the last record")

    net = Network(layers)
    if stats_kind == 1:
        norm_edges = norm_tables
        norm_per_bit = None
    else:
        norm_edges = None
        norm_per_bit = {
            b: {site: table[(b, b)] for site, table in norm_tables.items()}
            for b in bits
        }
    return ModelState(
        net=net, bits=bits, qparams=qparams,
        norm_per_bit=norm_per_bit, norm_edges=norm_edges,
        stored_ints=stored_ints if (shared and stored_ints) else None,
        shared_weight_scale=shared,
    )


def describe(path: str) -> str:
    """Human-readable summary used by the inspect subcommand."""
    state = load(path)
    size = os.path.getsize(path)
    mode = "shared highest-width integers" if state.shared_weight_scale else "unshared float32"
    lines = [
        f"checkpoint: {path}",
        f"size: {size} bytes",
        f"storage: {mode}",
        f"widths: {list(state.bits.bits)} (storage width {state.bits.highest})",
        f"norm statistics: {'per-edge table' if state.mixed else 'per-width'}",
        "layers:",
    ]
    for idx, layer in enumerate(state.net.layers):
        spec = layer.spec
        extra = ""
        if spec.kind in ("fully-connected", "conv2d"):
            extra = f" weight{tuple(layer.weight.shape)}" + (
                " quantized" if spec.quantized else " full-precision"
            )
        lines.append(f"  L{idx}: {spec.kind}{extra}")
    return "\n".join(lines)
