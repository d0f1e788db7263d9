"""Hessian-trace estimation tests.

For a quadratic f = 0.5 x^T H x the probe estimate v^T H v is exact per draw
whenever H is diagonal (Rademacher entries square to one), which pins the
estimator down without any averaging; the off-diagonal and network cases then
only need sanity bands around independently computed traces.
"""
import numpy as np
import pytest

from bitswitch.data import gaussian_blobs
from bitswitch.errors import NumericalError
from bitswitch.nn import mlp
from bitswitch.sensitivity import (
    SensitivityProfile,
    _layer_grad_fn,
    classify_layers,
    hutchinson_trace,
    profile_network,
)


def quadratic_grad(hessian):
    h = np.asarray(hessian, dtype=np.float64)
    return lambda theta: h @ theta


def test_diagonal_quadratic_is_exact_with_one_probe():
    grad = quadratic_grad(np.diag([1.0, 2.0, 3.0]))
    got = hutchinson_trace(grad, np.zeros(3), probes=1, rng=np.random.default_rng(0))
    assert got == pytest.approx(6.0, rel=1e-9)


def test_diagonal_quadratic_every_probe_count():
    grad = quadratic_grad(np.diag([-1.0, 4.0, 0.5]))
    for probes in (1, 7, 64):
        got = hutchinson_trace(grad, np.ones(3), probes, np.random.default_rng(probes))
        assert got == pytest.approx(3.5, rel=1e-9)


def test_off_diagonal_quadratic_converges_to_trace():
    # v^T H v = 5 + 2 v0 v1, so single probes scatter but the mean is 5
    grad = quadratic_grad([[2.0, 1.0], [1.0, 3.0]])
    got = hutchinson_trace(grad, np.zeros(2), probes=1000, rng=np.random.default_rng(1))
    assert got == pytest.approx(5.0, abs=0.3)


def test_network_trace_matches_dense_finite_differences():
    x, y = gaussian_blobs(48, classes=3, features=3, seed=5)
    net = mlp((3, 4, 4, 3), np.random.default_rng(6), dtype=np.float64)
    norm = net.make_norm_stats()
    for st in norm.values():
        st.mean = st.mean.astype(np.float64)
        st.var = st.var.astype(np.float64)

    grad_fn, theta0 = _layer_grad_fn(net, 2, norm, x, y)
    eps = 1e-5
    want = 0.0
    for i in range(theta0.size):
        e = np.zeros_like(theta0)
        e[i] = eps
        want += (grad_fn(theta0 + e)[i] - grad_fn(theta0 - e)[i]) / (2 * eps)

    prof = profile_network(net, norm, x, y, probes=500, seed=0, layer_indices=[2])
    assert prof.traces[0] == pytest.approx(want, rel=0.10)
    assert prof.param_counts == (16,)


def test_profile_is_deterministic_and_leaves_weights_alone():
    x, y = gaussian_blobs(60, classes=3, features=4, seed=7)
    net = mlp((4, 6, 6, 3), np.random.default_rng(8))
    norm = net.make_norm_stats()
    before = net.layers[2].weight.copy()
    a = profile_network(net, norm, x, y, probes=16, seed=3)
    b = profile_network(net, norm, x, y, probes=16, seed=3)
    c = profile_network(net, norm, x, y, probes=16, seed=4)
    assert a == b
    assert a.traces != c.traces
    np.testing.assert_array_equal(net.layers[2].weight, before)


def test_layers_profile_independently():
    # each layer draws from its own probe stream, so a single-layer profile
    # reproduces that layer's entry from the full profile bit for bit
    x, y = gaussian_blobs(60, classes=3, features=4, seed=9)
    net = mlp((4, 6, 6, 6, 3), np.random.default_rng(10))
    norm = net.make_norm_stats()
    full = profile_network(net, norm, x, y, probes=16, seed=11)
    assert full.layer_indices == (2, 5)
    solo = profile_network(net, norm, x, y, probes=16, seed=11, layer_indices=[5])
    assert solo.traces[0] == full.trace_of(5)


def test_classify_layers_threshold_and_ties():
    prof = SensitivityProfile((2, 5), (1.0, 3.0), (9, 9), probes=8, seed=0)
    assert classify_layers(prof) == {2: False, 5: True}
    tied = SensitivityProfile((2, 5), (2.0, 2.0), (9, 9), probes=8, seed=0)
    assert classify_layers(tied) == {2: True, 5: True}


def test_retry_with_smaller_step_recovers():
    h = np.diag([1.0, 2.0, 3.0])
    calls = {"n": 0}

    def flaky(theta):
        calls["n"] += 1
        if calls["n"] <= 2:  # first probe's initial +/- evaluations
            return np.full(3, np.nan)
        return h @ theta

    got = hutchinson_trace(flaky, np.zeros(3), probes=2, rng=np.random.default_rng(2))
    assert got == pytest.approx(6.0, rel=1e-9)
    assert calls["n"] == 6  # 2 wasted + 2 retried + 2 for the second probe


def test_persistent_nan_raises():
    def bad(theta):
        return np.full_like(theta, np.nan)

    with pytest.raises(NumericalError):
        hutchinson_trace(bad, np.zeros(2), probes=1, rng=np.random.default_rng(3))


def test_bad_probe_count_rejected():
    with pytest.raises(ValueError):
        hutchinson_trace(quadratic_grad(np.eye(2)), np.zeros(2), 0, np.random.default_rng(0))


def test_profile_requires_layers():
    x, y = gaussian_blobs(20, classes=2, features=3, seed=0)
    net = mlp((3, 4, 2), np.random.default_rng(0))  # no quantized layers
    with pytest.raises(ValueError):
        profile_network(net, {}, x, y, probes=4)


class TestProfileJson:
    def test_round_trip(self):
        prof = SensitivityProfile((2, 5), (1.5, -0.25), (16, 36), probes=64, seed=9)
        assert SensitivityProfile.from_json(prof.to_json()) == prof

    def test_tampered_mean_rejected(self):
        import json

        payload = json.loads(SensitivityProfile((2,), (4.0,), (16,), 8, 0).to_json())
        payload["mean_trace"] = 3.0
        with pytest.raises(ValueError):
            SensitivityProfile.from_json(json.dumps(payload))

    def test_trace_lookup(self):
        prof = SensitivityProfile((2, 5), (1.0, 2.0), (4, 4), 8, 0)
        assert prof.trace_of(5) == 2.0
        with pytest.raises(ValueError):
            prof.trace_of(99)
