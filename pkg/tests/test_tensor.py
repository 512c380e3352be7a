"""Tensor-engine behaviour: forward semantics plus the adjoint contract."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halstereo.gradcheck import grad_check
from halstereo.tensor import (
    ConvSpec,
    Tensor,
    activation,
    avg_pool_axis,
    concat,
    conv2d,
    conv3d,
    elu,
    gelu,
    l2_normalize,
    layer_norm,
    no_grad,
    sample_axis1_linear,
    softmax,
    tsum,
    upsample_bilinear,
)


class TestTensorBasics:
    def test_shape_data_agree(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.shape == (2, 3)
        assert t.size == 6

    def test_nonfinite_rejected(self):
        with pytest.raises(FloatingPointError):
            Tensor([1.0, np.nan])
        with pytest.raises(FloatingPointError):
            Tensor([np.inf])

    def test_nonfinite_op_result_rejected(self):
        from halstereo.tensor import exp
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            exp(Tensor([1400.0]))

    def test_no_grad_blocks_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = tsum(x * x)
        assert not y.requires_grad


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 4, 4)))
        spec = ConvSpec(1, 3, 3, bias=False)
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = conv2d(x, spec, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input(self):
        spec = ConvSpec(3, 2, 4)
        rng = np.random.default_rng(1)
        w = Tensor(rng.standard_normal(spec.weight_shape))
        out = conv2d(Tensor(np.zeros((2, 5, 5))), spec, w, Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_ones_kernel_center(self):
        spec = ConvSpec(3, 1, 1, bias=False)
        out = conv2d(Tensor(np.ones((1, 3, 3))), spec, Tensor(np.ones((1, 1, 3, 3))))
        assert out.data[0, 1, 1] == 9.0

    def test_grouped_equals_independent(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((4, 5, 5)))
        spec = ConvSpec(3, 4, 6, groups=2, bias=False)
        w = Tensor(rng.standard_normal(spec.weight_shape))
        out = conv2d(x, spec, w)
        single = ConvSpec(3, 2, 3, bias=False)
        parts = [
            conv2d(Tensor(x.data[:2]), single, Tensor(w.data[:3])),
            conv2d(Tensor(x.data[2:]), single, Tensor(w.data[3:])),
        ]
        np.testing.assert_allclose(out.data, np.concatenate([p.data for p in parts]),
                                   atol=1e-14)

    def test_shape_errors(self):
        spec = ConvSpec(3, 2, 4)
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((3, 4, 4))), spec,
                   Tensor(rng.standard_normal(spec.weight_shape)))
        with pytest.raises(ValueError):
            ConvSpec(3, 3, 4, groups=2)
        with pytest.raises(ValueError):
            ConvSpec(4, 2, 4)  # even kernel

    def test_stride_downsamples(self):
        spec = ConvSpec(3, 1, 1, stride=2, bias=False)
        rng = np.random.default_rng(4)
        out = conv2d(Tensor(rng.standard_normal((1, 8, 6))), spec,
                     Tensor(rng.standard_normal((1, 1, 3, 3))))
        assert out.shape == (1, 4, 3)


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(Tensor([3.0, 4.0]), 0)
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(l2_normalize(Tensor(v), 0).data, v, atol=1e-15)

    def test_zero_vector_guard(self):
        out = l2_normalize(Tensor(np.zeros(4)), 0)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            l2_normalize(Tensor(np.ones(3)), 2)


class TestLayerNorm:
    def test_constant_input_zero(self):
        x = Tensor(np.full((3, 2, 2), 5.0))
        out = layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_plus_minus_one(self):
        x = Tensor(np.array([1.0, -1.0]).reshape(2, 1, 1))
        out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data[:, 0, 0], [1.0, -1.0], atol=1e-6)

    def test_zero_gain_gives_offset(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((4, 3, 3)))
        offset = Tensor(rng.standard_normal(4))
        out = layer_norm(x, Tensor(np.zeros(4)), offset)
        np.testing.assert_allclose(
            out.data, np.broadcast_to(offset.data[:, None, None], (4, 3, 3)),
            atol=1e-14)

    def test_statistics_invariant(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((8, 4, 4)))
        out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        mean = out.data.mean(axis=0)
        var = out.data.var(axis=0)
        assert np.abs(mean).max() <= 1e-10
        assert np.abs(var - 1.0).max() <= 1e-6


class TestActivations:
    def test_zero_values(self):
        assert activation(Tensor([0.0]), "gelu").data[0] == 0.0
        assert activation(Tensor([0.0]), "elu").data[0] == 0.0

    def test_constant_softmax(self):
        out = activation(Tensor(np.full(4, 2.5)), "softmax", axis=0)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_elu_analytic(self):
        out = elu(Tensor([-np.log(2.0)]))
        np.testing.assert_allclose(out.data, [-0.5], atol=1e-15)

    def test_gelu_antisymmetric_part(self):
        # gelu(x) - gelu(-x) == x for the erf formulation
        rng = np.random.default_rng(7)
        x = rng.standard_normal(100)
        diff = gelu(Tensor(x)).data - gelu(Tensor(-x)).data
        np.testing.assert_allclose(diff, x, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation(Tensor([1.0]), "swish")

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_simplex(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((5, 7)) * 10)
        out = softmax(x, axis=1)
        assert np.all(out.data > 0.0) and np.all(out.data <= 1.0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


class TestGradCheckBasics:
    def test_sum_of_squares(self):
        rep = grad_check(lambda x: tsum(x * x), [Tensor([3.0])], 1e-4,
                         name="sum_sq")
        assert rep.passed
        assert rep.max_rel_error < 1e-6

    def test_sum_gradient_ones(self):
        x = Tensor(np.arange(4.0))
        rep = grad_check(tsum, [x], 1e-4, name="sum")
        assert rep.passed

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: x * 2.0, [Tensor([1.0, 2.0])], 1e-4)

    @pytest.mark.parametrize("op,shape", [
        (lambda x: tsum(softmax(x, 0) ** 2), (6,)),
        (lambda x: tsum(l2_normalize(x, 0) * 3.0), (5,)),
        (lambda x: tsum(gelu(x) * elu(x)), (7,)),
        (lambda x: tsum(upsample_bilinear(x, 2) ** 2), (2, 3, 4)),
        (lambda x: tsum(avg_pool_axis(x, 1) ** 2), (2, 5)),
    ])
    def test_assorted_ops(self, op, shape):
        rng = np.random.default_rng(8)
        assert grad_check(op, [Tensor(rng.standard_normal(shape))], 1e-4).passed


class TestConv3d:
    def test_shape_preserved(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 4, 5)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
        assert conv3d(x, w).shape == (3, 3, 4, 5)

    def test_gradcheck(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((2, 3, 3, 3)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
        rep = grad_check(lambda x_, w_: tsum(conv3d(x_, w_) ** 2), [x, w], 1e-4)
        assert rep.passed


class TestSampling:
    def test_linear_interp_exact(self):
        vol = Tensor(np.arange(24.0).reshape(1, 6, 2, 2))
        pos = Tensor(np.full((2, 2), 2.0))
        out = sample_axis1_linear(vol, pos)
        np.testing.assert_array_equal(out.data[0], vol.data[0, 2])

    def test_outside_is_zero(self):
        vol = Tensor(np.ones((1, 3, 2, 2)))
        out = sample_axis1_linear(vol, Tensor(np.full((2, 2), 10.0)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_concat_split_roundtrip(self):
        rng = np.random.default_rng(11)
        a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((4, 3)))
        joined = concat([a, b], axis=0)
        np.testing.assert_array_equal(joined.data[:2], a.data)
        np.testing.assert_array_equal(joined.data[2:], b.data)
