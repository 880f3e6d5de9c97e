import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowdet.data import toy_dataset
from flowdet.errors import DegenerateData, EmptyTrace, NotOrthogonal
from flowdet.flow import FlowModel, layer_fn, numeric_jacobian
from flowdet.layers import DualCoupling, InvConv, Linear
from flowdet.qlf import (hadamard_audit, ppca_lmax, prop1_audit, qlf_gradient, qlf_lmax_per_point,
                         qlf_lmax_per_point_report, qlf_objective, qlf_stationary_W)
from flowdet.training import TrainConfig, TrainTrace, mean_nll, train

LOG_2PI = math.log(2.0 * math.pi)


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_spd(rng, d):
    b = rng.standard_normal((d, d))
    return b @ b.T + 0.1 * np.eye(d)


class TestPerPoint:
    def test_unit_eigenvalue(self):
        assert qlf_lmax_per_point(np.array([1.0]), eps=1e-12) == pytest.approx(-1.4189385332046727)

    def test_rank_one(self):
        want = -0.5 * (2 * LOG_2PI + 2 + math.log(5.0) + math.log(1e-6))
        assert qlf_lmax_per_point(np.array([1.0, 2.0]), eps=1e-6) == pytest.approx(want, rel=1e-12)

    def test_origin_fully_floored(self):
        d = 3
        want = -0.5 * (d * LOG_2PI + d + d * math.log(1e-6))
        assert qlf_lmax_per_point(np.zeros(d), eps=1e-6) == pytest.approx(want, rel=1e-12)

    def test_report_matches_pointwise(self, rng):
        data = rng.standard_normal((20, 3))
        report = qlf_lmax_per_point_report(data, eps=1e-6)
        want = np.mean([qlf_lmax_per_point(row, 1e-6) for row in data])
        assert report.lmax_nats == pytest.approx(want, rel=1e-10)
        assert report.floored_count == 20 * 2
        assert report.mode == "per_point"

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            qlf_lmax_per_point(np.ones(2), eps=0.0)


class TestPpca:
    def test_standard_normal(self):
        x = np.random.default_rng(0).standard_normal((100_000, 2))
        assert ppca_lmax(x).lmax_nats == pytest.approx(-2.837877, abs=0.02)

    def test_axis_line(self, rng):
        x = np.stack([rng.standard_normal(50), np.zeros(50)], axis=1)
        report = ppca_lmax(x, eps=1e-6)
        assert report.floored_count == 1
        assert report.eigenvalues[-1] == 1e-6

    def test_scaling_law(self, rng):
        x = rng.standard_normal((500, 3)) @ random_spd(rng, 3)
        drop = ppca_lmax(x).lmax_nats - ppca_lmax(2 * x).lmax_nats
        assert drop == pytest.approx(3 * math.log(2.0), rel=1e-12)

    def test_shift_invariant(self, rng):
        x = rng.standard_normal((300, 2))
        assert ppca_lmax(x + 7.0).lmax_nats == pytest.approx(ppca_lmax(x).lmax_nats, rel=1e-10)

    def test_bits_per_dim(self, rng):
        x = rng.standard_normal((300, 2))
        r = ppca_lmax(x, bit_depth=8)
        assert r.lmax_bpd == pytest.approx(-r.lmax_nats / (2 * math.log(2.0)) + 8)

    def test_too_few_points(self):
        with pytest.raises(DegenerateData):
            ppca_lmax(np.ones((1, 2)))

    def test_all_floored(self):
        with pytest.raises(DegenerateData):
            ppca_lmax(np.ones((5, 2)))

    def test_equals_gaussian_fit_objective(self, rng):
        # the optimum equals the objective evaluated at the stationary W
        x = rng.standard_normal((2000, 3)) @ random_spd(rng, 3)
        xc = x - x.mean(axis=0)
        s = xc.T @ xc / len(x)
        w = qlf_stationary_W(s, np.eye(3))
        assert qlf_objective(w, s) == pytest.approx(ppca_lmax(x).lmax_nats, rel=1e-10)


class TestStationary:
    def test_identity(self):
        np.testing.assert_allclose(qlf_stationary_W(np.eye(2), np.eye(2)), np.eye(2), atol=1e-15)

    def test_diagonal(self):
        w = qlf_stationary_W(np.diag([4.0, 1.0]), np.eye(2))
        np.testing.assert_allclose(np.abs(w), np.diag([0.5, 1.0]), atol=1e-15)

    def test_random_gradient_vanishes(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            d = int(rng.integers(1, 9))
            s = random_spd(rng, d)
            w = qlf_stationary_W(s, random_orthogonal(rng, d))
            assert np.linalg.norm(qlf_gradient(w, s)) <= 1e-10

    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rotation_invariant_value(self, d, seed):
        rng = np.random.default_rng(seed)
        s = random_spd(rng, d)
        a = qlf_objective(qlf_stationary_W(s, np.eye(d)), s)
        b = qlf_objective(qlf_stationary_W(s, random_orthogonal(rng, d)), s)
        assert a == pytest.approx(b, rel=1e-9, abs=1e-9)

    def test_not_orthogonal(self):
        with pytest.raises(NotOrthogonal):
            qlf_stationary_W(np.eye(2), np.array([[1.0, 0.1], [0.0, 1.0]]))


class TestGradient:
    def test_identity(self):
        np.testing.assert_array_equal(qlf_gradient(np.eye(2), np.eye(2)), np.zeros((2, 2)))

    def test_diagonal(self):
        np.testing.assert_allclose(qlf_gradient(np.eye(2), np.diag([4.0, 1.0])), np.diag([-3.0, 0.0]))

    def test_matches_finite_differences(self, rng):
        s = random_spd(rng, 3)
        w = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        fd = numeric_jacobian(lambda v: np.array([qlf_objective(v.reshape(3, 3), s)]), w.ravel())
        np.testing.assert_allclose(qlf_gradient(w, s).ravel(), fd[0], atol=1e-7)


class TestHadamard:
    def test_diagonal(self):
        det, col, spectral, ok = hadamard_audit(np.diag([2.0, 0.5]))
        assert (det, col) == (1.0, 1.0)
        assert spectral == pytest.approx(4.0, rel=1e-12)
        assert ok

    def test_identity(self):
        det, col, spectral, ok = hadamard_audit(np.eye(3))
        assert (det, col, ok) == (1.0, 1.0, True)
        assert spectral == pytest.approx(1.0, rel=1e-12)

    def test_random(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            d = int(rng.integers(1, 9))
            assert hadamard_audit(rng.standard_normal((d, d)) * rng.uniform(0.1, 10))[3]

    def test_layer_jacobian(self, rng):
        layer = DualCoupling((4, 1, 1), hidden=8, rng=rng)
        for k in layer.param_names:
            layer.params[k] = layer.params[k] + 0.5 * rng.standard_normal(layer.params[k].shape)
        assert hadamard_audit(numeric_jacobian(layer_fn(layer), rng.standard_normal(4)))[3]


class TestProp1:
    def test_identity_trace(self):
        trace = TrainTrace(3)
        for _ in range(5):
            trace.append(1.0, 1.0, np.zeros(3), np.ones(3), np.ones(3))
        report = prop1_audit(trace, 0, 0.5)
        np.testing.assert_array_equal(report.logdet_sums, 0.0)
        assert report.first_flag is None
        assert not report.flags.any()

    def test_ramp(self):
        trace = TrainTrace(2)
        for t in range(10):
            trace.append(1.0, 1.0, np.array([5.0, 0.3 * t]), np.ones(2), np.array([t, 1.0]))
        report = prop1_audit(trace, 0, 1.0)
        assert report.first_flag == 4
        np.testing.assert_array_equal(report.grad_norms, np.arange(10.0))
        assert report.lines()[2] == "first_flag=4"

    def test_empty(self):
        with pytest.raises(EmptyTrace):
            prop1_audit(TrainTrace(2), 0, 1.0)

    def test_bad_layer(self):
        trace = TrainTrace(1)
        trace.append(1.0, 1.0, np.zeros(1), np.ones(1), np.ones(1))
        with pytest.raises(ValueError):
            prop1_audit(trace, 1, 1.0)


class TestUpperBound:
    def test_linear_flow_on_gaussian(self, rng):
        x = rng.standard_normal((20_000, 3)) @ random_spd(rng, 3)
        model = FlowModel.from_layers([Linear((3, 1, 1))])
        model, _ = train(model, TrainConfig(steps=1500, batch_size=512, holdout_fraction=0), x)
        ll = -mean_nll(model, x)
        bound = ppca_lmax(x).lmax_nats
        assert ll <= bound + 1e-6
        assert ll >= bound - 0.05

    def test_conv_coupling_flow_on_rings(self):
        x = toy_dataset("rings", 5000, seed=0)
        rng = np.random.default_rng(0)
        layers = []
        for _ in range(3):
            layers += [InvConv((2, 1, 1)), DualCoupling((2, 1, 1), hidden=16, rng=rng)]
        model = FlowModel.from_layers(layers)
        model, _ = train(model, TrainConfig(steps=800, batch_size=256, holdout_fraction=0), x)
        assert -mean_nll(model, x) <= ppca_lmax(x).lmax_nats + 1e-6
