"""Recurrent refinement operator, convex upsampling, and the sequence loss."""

import numpy as np
import pytest

from halstereo.correlation import CorrelationVolume, build_pyramid
from halstereo.disparity import DisparityMap
from halstereo.refine import (
    RecurrentState,
    RefineParams,
    convex_upsample,
    init_state,
    lstm_update,
    masked_mean,
    refine_disparity,
    sequence_loss,
    smooth_l1,
)
from halstereo.tensor import Tensor


def _make_setup(rng, h=8, w=8, corr_width=6, ctx_ch=4, hidden=4, levels=3,
                zero_delta=False):
    params = RefineParams.create(rng, corr_width, ctx_ch, hidden_dim=hidden,
                                 n_levels=levels, motion_ch=4,
                                 zero_delta=zero_delta)
    vol = CorrelationVolume(values=Tensor(rng.standard_normal((2, 6, h, w))))
    pyr = build_pyramid(vol, n_levels=1, radius=1)  # width 2*3*1? groups=2 -> 6
    context = Tensor(rng.standard_normal((ctx_ch, h, w)))
    d0 = DisparityMap(values=Tensor(np.abs(rng.standard_normal((h, w))) + 1.0))
    return params, pyr, context, d0


class TestRecurrentState:
    def test_mismatched_levels_rejected(self):
        h = [Tensor(np.zeros((2, 4, 4)))]
        with pytest.raises(ValueError):
            RecurrentState(hidden=h, cell=[])
        with pytest.raises(ValueError):
            RecurrentState(hidden=h, cell=[Tensor(np.zeros((2, 2, 2)))])

    def test_init_state_levels_and_zero_cells(self):
        rng = np.random.default_rng(0)
        params, _, context, _ = _make_setup(rng)
        state = init_state(context, params)
        assert len(state.hidden) == 3
        shapes = [tuple(t.shape) for t in state.hidden]
        assert shapes == [(4, 8, 8), (4, 4, 4), (4, 2, 2)]
        for c in state.cell:
            np.testing.assert_array_equal(c.data, 0.0)
        # tanh keeps the seeded hidden states in (-1, 1)
        for h in state.hidden:
            assert np.all(np.abs(h.data) < 1.0)


class TestLstmUpdate:
    def test_zero_gate_weights_analytic(self):
        # all-zero gate convolutions: i = f = o = 1/2, candidate = 0, so the
        # new cell is c/2 and the new hidden is tanh(c/2)/2
        rng = np.random.default_rng(1)
        params, pyr, context, d0 = _make_setup(rng)
        for layer in params.gate_convs:
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        cells = [Tensor(rng.standard_normal(s)) for s in
                 [(4, 8, 8), (4, 4, 4), (4, 2, 2)]]
        hiddens = [Tensor(rng.standard_normal(c.shape)) for c in cells]
        state = RecurrentState(hidden=hiddens, cell=cells)
        from halstereo.correlation import pyramid_lookup
        corr = pyramid_lookup(pyr, d0)
        new_state, _ = lstm_update(state, context, corr, d0, params)
        for c_old, c_new, h_new in zip(cells, new_state.cell, new_state.hidden):
            np.testing.assert_allclose(c_new.data, 0.5 * c_old.data, atol=1e-12)
            np.testing.assert_allclose(h_new.data, 0.5 * np.tanh(0.5 * c_old.data),
                                       atol=1e-12)

    def test_zero_delta_head(self):
        rng = np.random.default_rng(2)
        params, pyr, context, d0 = _make_setup(rng, zero_delta=True)
        _, full = refine_disparity(d0, pyr, context, 3, params)
        field, _ = refine_disparity(d0, pyr, context, 3, params)
        for pred in field:
            np.testing.assert_array_equal(pred.values.data, d0.values.data)
        del full

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        params, pyr, context, d0 = _make_setup(rng)
        a = refine_disparity(d0, pyr, context, 2, params)[0][-1]
        b = refine_disparity(d0, pyr, context, 2, params)[0][-1]
        np.testing.assert_array_equal(a.values.data, b.values.data)


class TestRefineDisparity:
    def test_single_iteration_counts(self):
        rng = np.random.default_rng(4)
        params, pyr, context, d0 = _make_setup(rng)
        field, full = refine_disparity(d0, pyr, context, 1, params)
        assert len(field) == 1 and len(full) == 1
        assert field[0].values.shape == (8, 8)
        assert full[0].values.shape == (32, 32)

    def test_bad_iteration_count(self):
        rng = np.random.default_rng(5)
        params, pyr, context, d0 = _make_setup(rng)
        with pytest.raises(ValueError):
            refine_disparity(d0, pyr, context, 0, params)

    def test_descent_smoke_majority(self):
        # one small gradient step on the refinement weights lowers the loss
        # for most random initializations
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            params, pyr, context, d0 = _make_setup(rng, h=4, w=4)
            gt = DisparityMap(values=Tensor(np.full((4, 4), 2.0)))
            weights = params.parameters()
            field, _ = refine_disparity(d0, pyr, context, 2, params)
            loss = sequence_loss(field, d0, gt)
            loss.backward()
            lr = 1e-4
            for w in weights:
                if w.grad is not None:
                    w.data -= lr * w.grad
                    w.grad = None
            field2, _ = refine_disparity(d0, pyr, context, 2, params)
            loss2 = sequence_loss(field2, d0, gt)
            if loss2.data.item() < loss.data.item():
                wins += 1
        assert wins >= 6


class TestConvexUpsample:
    def test_constant_field_scales(self):
        rng = np.random.default_rng(6)
        disp = Tensor(np.full((3, 3), 2.0))
        logits = Tensor(rng.standard_normal((9 * 16, 3, 3)))
        up = convex_upsample(disp, logits)
        inner = up.data[4:-4, 4:-4]
        np.testing.assert_allclose(inner, 8.0, atol=1e-12)

    def test_center_weight_replicates(self):
        # putting all softmax mass on the center neighbour makes each 4x4
        # output cell an exact copy of its source pixel, scaled by 4
        disp = Tensor(np.arange(9.0).reshape(3, 3))
        logits_np = np.full((9, 16, 3, 3), -50.0)
        logits_np[4] = 50.0
        up = convex_upsample(disp, Tensor(logits_np.reshape(144, 3, 3)))
        expected = np.kron(disp.data, np.ones((4, 4))) * 4.0
        np.testing.assert_allclose(up.data, expected, atol=1e-10)

    def test_convexity_bounds(self):
        rng = np.random.default_rng(7)
        disp = Tensor(rng.uniform(1.0, 3.0, (4, 4)))
        logits = Tensor(rng.standard_normal((144, 4, 4)))
        up = convex_upsample(disp, logits)
        # zero padding can pull values below 4*min, but never above 4*max
        assert up.data.max() <= 4.0 * disp.data.max() + 1e-9
        assert up.data.min() >= 0.0


class TestSequenceLoss:
    def test_hand_value(self):
        # d0 error 2 everywhere: smooth-L1 = 1.5; two iterates with absolute
        # errors 1 and 0.5 weighted 0.9 and 1.0 -> 1.5 + 0.9 + 0.5 = 2.9
        gt = DisparityMap(values=Tensor(np.zeros((2, 2))))
        d0 = DisparityMap(values=Tensor(np.full((2, 2), 2.0)))
        preds = [DisparityMap(values=Tensor(np.full((2, 2), 1.0))),
                 DisparityMap(values=Tensor(np.full((2, 2), 0.5)))]
        loss = sequence_loss(preds, d0, gt, gamma=0.9)
        np.testing.assert_allclose(loss.data, 2.9, atol=1e-12)

    def test_later_iterates_weigh_more(self):
        gt = DisparityMap(values=Tensor(np.zeros((2, 2))))
        d0 = DisparityMap(values=Tensor(np.zeros((2, 2))))
        one = Tensor(np.ones((2, 2)))
        zero = Tensor(np.zeros((2, 2)))
        early_bad = sequence_loss(
            [DisparityMap(values=one), DisparityMap(values=zero)], d0, gt)
        late_bad = sequence_loss(
            [DisparityMap(values=zero), DisparityMap(values=one)], d0, gt)
        assert early_bad.data.item() < late_bad.data.item()

    def test_mask_excludes_invalid(self):
        valid = np.array([[True, False], [True, True]])
        gt = DisparityMap(values=Tensor(np.zeros((2, 2))), valid=valid)
        bad = np.zeros((2, 2))
        bad[0, 1] = 100.0  # only on the invalid pixel
        d0 = DisparityMap(values=Tensor(bad))
        loss = sequence_loss([DisparityMap(values=Tensor(bad))], d0, gt)
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-12)

    def test_empty_mask_rejected(self):
        gt = DisparityMap(values=Tensor(np.zeros((2, 2))),
                          valid=np.zeros((2, 2), dtype=bool))
        d0 = DisparityMap(values=Tensor(np.zeros((2, 2))))
        with pytest.raises(ValueError):
            sequence_loss([d0], d0, gt)

    def test_bad_gamma(self):
        gt = DisparityMap(values=Tensor(np.zeros((2, 2))))
        d0 = DisparityMap(values=Tensor(np.zeros((2, 2))))
        with pytest.raises(ValueError):
            sequence_loss([d0], d0, gt, gamma=0.0)

    def test_smooth_l1_branches(self):
        vals = smooth_l1(Tensor([-2.0, -0.5, 0.0, 0.5, 2.0]))
        np.testing.assert_allclose(vals.data, [1.5, 0.125, 0.0, 0.125, 1.5],
                                   atol=1e-15)

    def test_masked_mean_value(self):
        x = Tensor(np.array([[1.0, 100.0], [3.0, 5.0]]))
        mask = np.array([[True, False], [True, True]])
        assert masked_mean(x, mask).data.item() == 3.0
