"""Layer sensitivity from stochastic Hessian-trace estimates.

The trace of each quantized layer's weight-block Hessian is estimated with
Rademacher probes: E[v^T H v] over sign vectors v equals tr(H).  Hessian-vector
products come from central finite differences of first-order gradients, so no
second-order machinery is needed.  A layer counts as sensitive when its trace
is at least the mean trace over the profiled layers (ties are sensitive).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .nn import Network, NormStats, backward, forward, softmax_cross_entropy

DEFAULT_PROBES = 128
HVP_EPS_SCALE = 1e-3


def hutchinson_trace(grad_fn, theta0: np.ndarray, probes: int, rng,
                     eps_scale: float = HVP_EPS_SCALE) -> float:
    """Estimate tr(H) of the function whose gradient ``grad_fn`` returns.

    Args:
        grad_fn: maps a parameter vector to the gradient at that point.
        theta0: point of evaluation (flat vector).
        probes: number of Rademacher probes averaged.
        rng: numpy Generator; each probe draws one sign vector from it.
        eps_scale: finite-difference step is eps_scale * (1 + max|theta0|).

    The probe estimate v^T H v uses Hv ~ (g(theta0 + eps v) - g(theta0 - eps v))
    / (2 eps).  A non-finite product retries once with eps / 10, then raises.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    if probes < 1:
        raise ValueError(f"probes must be >= 1, got {probes}")
    largest = float(np.max(np.abs(theta0))) if theta0.size else 0.0
    eps0 = eps_scale * (1.0 + largest)
    total = 0.0
    for _ in range(probes):
        v = rng.integers(0, 2, size=theta0.shape).astype(np.float64) * 2.0 - 1.0
        eps = eps0
        for attempt in range(2):
            gp = np.asarray(grad_fn(theta0 + eps * v), dtype=np.float64)
            gm = np.asarray(grad_fn(theta0 - eps * v), dtype=np.float64)
            hv = (gp - gm) / (2.0 * eps)
            quad = float(v @ hv)
            if math.isfinite(quad):
                break
            eps = eps / 10.0
        else:
            raise NumericalError("non-finite Hessian-vector product after retry")
        total += quad
    return total / probes


@dataclass
class SensitivityProfile:
    """Per-layer trace estimates plus the metadata to reproduce them."""

    layer_indices: tuple[int, ...]
    traces: tuple[float, ...]
    param_counts: tuple[int, ...]
    probes: int
    seed: int

    @property
    def mean_trace(self) -> float:
        return sum(self.traces) / len(self.traces)

    def trace_of(self, layer_index: int) -> float:
        return self.traces[self.layer_indices.index(layer_index)]

    def to_json(self) -> str:
        payload = {
            "layers": [
                {"index": i, "trace": t, "param_count": n}
                for i, t, n in zip(self.layer_indices, self.traces, self.param_counts)
            ],
            "mean_trace": self.mean_trace,
            "probes": self.probes,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SensitivityProfile":
        payload = json.loads(text)
        layers = payload["layers"]
        prof = cls(
            layer_indices=tuple(int(l["index"]) for l in layers),
            traces=tuple(float(l["trace"]) for l in layers),
            param_counts=tuple(int(l["param_count"]) for l in layers),
            probes=int(payload["probes"]),
            seed=int(payload["seed"]),
        )
        recorded = float(payload["mean_trace"])
        if not math.isclose(recorded, prof.mean_trace, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("profile mean_trace does not match its layer traces")
        return prof


def _layer_grad_fn(net: Network, idx: int, norm: dict[int, NormStats], x, y):
    """Gradient of the data loss restricted to one layer's weight block."""
    layer = net.layers[idx]
    base = layer.weight
    shape = base.shape

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        saved = layer.weight
        layer.weight = theta.reshape(shape).astype(saved.dtype)
        try:
            _, cache = forward(net, x, None, norm, training=False)
            grads = backward(net, cache, y)
        finally:
            layer.weight = saved
        return grads.weights[idx].ravel()

    return grad_fn, base.ravel()


def profile_network(net: Network, norm: dict[int, NormStats], x, y,
                    probes: int = DEFAULT_PROBES, seed: int = 0,
                    layer_indices=None,
                    eps_scale: float = HVP_EPS_SCALE) -> SensitivityProfile:
    """Hessian-trace profile of the float model on one fixed sample batch.

    Probes are drawn from a per-layer stream derived from ``seed``, so layers
    can be profiled independently (or in parallel) with identical results.
    """
    if layer_indices is None:
        layer_indices = net.quantized_indices
    if not layer_indices:
        raise ValueError("no layers to profile")
    traces = []
    counts = []
    for idx in layer_indices:
        grad_fn, theta0 = _layer_grad_fn(net, idx, norm, x, y)
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        traces.append(hutchinson_trace(grad_fn, theta0, probes, rng, eps_scale))
        counts.append(int(net.layers[idx].weight.size))
    return SensitivityProfile(
        layer_indices=tuple(int(i) for i in layer_indices),
        traces=tuple(traces),
        param_counts=tuple(counts),
        probes=probes,
        seed=seed,
    )


def classify_layers(profile: SensitivityProfile) -> dict[int, bool]:
    """True = sensitive (trace at or above the mean over profiled layers)."""
    mean = profile.mean_trace
    return {i: t >= mean for i, t in zip(profile.layer_indices, profile.traces)}
