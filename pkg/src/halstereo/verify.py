"""Numerical verification suites: gradient checks and kernel equivalence.

Shared by the CLI subcommands and the acceptance tests so both run the
exact same checks.
"""

from __future__ import annotations

import numpy as np

from . import attention, correlation, refine
from .attention import MkoiParams
from .correlation import CorrelationVolume, RegularizerParams
from .disparity import DisparityMap
from .gradcheck import DEFAULT_TOLERANCE, grad_check
from .tensor import ConvSpec, Tensor, conv2d, dense_kernel, elu, layer_norm, tsum


def _const(rng, shape):
    return Tensor(rng.standard_normal(shape))


def gradient_suite(tolerance=DEFAULT_TOLERANCE, seed=666):
    """Run every operation's finite-difference check; returns GradReports."""
    rng = np.random.default_rng(seed)
    reports = []

    # conv2d with groups
    spec = ConvSpec(3, 4, 4, groups=2)
    w = _const(rng, spec.weight_shape)
    b = _const(rng, (4,))
    x = _const(rng, (4, 5, 5))
    r = _const(rng, (4, 5, 5))
    reports.append(grad_check(
        lambda x_, w_, b_: tsum(conv2d(x_, spec, w_, b_) * r),
        [x, w, b], tolerance, name="conv2d"))

    # layer_norm
    x = _const(rng, (4, 3, 3))
    gain = _const(rng, (4,))
    offset = _const(rng, (4,))
    r = _const(rng, (4, 3, 3))
    reports.append(grad_check(
        lambda x_, g_, o_: tsum(layer_norm(x_, g_, o_) * r),
        [x, gain, offset], tolerance, name="layer_norm"))

    # hadamard_attention
    q, k = _const(rng, (4, 3, 3)), _const(rng, (4, 3, 3))
    r = _const(rng, (4, 3, 3))
    reports.append(grad_check(
        lambda q_, k_: tsum(attention.hadamard_attention(q_, k_) * r),
        [q, k], tolerance, name="hadamard_attention"))

    # dense attention kernel (keep samples away from the 0 kink)
    a = Tensor(np.where(np.abs(z := rng.standard_normal((5, 5))) < 0.05,
                        z + 0.1, z))
    r = _const(rng, (5, 5))
    reports.append(grad_check(lambda a_: tsum(dense_kernel(a_) * r),
                              [a], tolerance, name="dak"))

    # mkoi (including its weights)
    params = MkoiParams.create(rng, 4)
    a_pre, v = _const(rng, (4, 4, 4)), _const(rng, (4, 4, 4))
    r = _const(rng, (4, 4, 4))

    def mkoi_loss(a_, v_, ew, fw, b0, b1, b2):
        params.expand.weight = ew
        params.fuse.weight = fw
        for layer, bw in zip(params.branch_convs, (b0, b1, b2)):
            layer.weight = bw
        return tsum(attention.mkoi(a_, v_, params) * r)

    reports.append(grad_check(
        mkoi_loss,
        [a_pre, v, params.expand.weight, params.fuse.weight,
         *[l.weight for l in params.branch_convs]],
        tolerance, name="mkoi"))

    # sgff (weights included)
    sg = attention.SgffParams.create(rng, 4)
    v = _const(rng, (4, 4, 4))
    r = _const(rng, (4, 4, 4))

    def sgff_loss(v_, w1, w2, w3, w4):
        sg.proj_in.weight, sg.gate_conv.weight = w1, w2
        sg.value_conv.weight, sg.proj_out.weight = w3, w4
        return tsum(attention.sgff(v_, sg) * r)

    reports.append(grad_check(
        sgff_loss,
        [v, sg.proj_in.weight, sg.gate_conv.weight, sg.value_conv.weight,
         sg.proj_out.weight],
        tolerance, name="sgff"))

    # full transformer block on an 8-channel 6x6 input
    blk = attention.BlockParams.create(rng, 8)
    v = _const(rng, (8, 6, 6))
    reports.append(grad_check(
        lambda v_: tsum(attention.transformer_block(v_, blk)),
        [v], tolerance, name="transformer_block"))

    # correlation volume + regularizer
    reg = RegularizerParams.create(rng, 2, hidden=4)
    f_l, f_r = _const(rng, (4, 3, 6)), _const(rng, (4, 3, 6))
    r = _const(rng, (2, 3, 3, 6))

    def corr_loss(fl, fr, w0, w1, w2):
        reg.weights = [w0, w1, w2]
        vol = correlation.build_gwc_volume(fl, fr, 3, 2)
        return tsum(correlation.regularize_volume(vol, reg).values * r)

    reports.append(grad_check(
        corr_loss, [f_l, f_r, *reg.weights], tolerance,
        name="build_gwc_volume+regularize"))

    # soft_argmin_init
    vals = _const(rng, (2, 4, 3, 3))
    r = _const(rng, (3, 3))
    reports.append(grad_check(
        lambda v_: tsum(correlation.soft_argmin_init(CorrelationVolume(v_)).values * r),
        [vals], tolerance, name="soft_argmin_init"))

    # pyramid_lookup (positions away from bin boundaries on both levels)
    vals = _const(rng, (2, 5, 3, 3))
    disp = Tensor(1.0 + rng.uniform(0.55, 0.9, (3, 3)))
    r = _const(rng, (2 * 3 * 2, 3, 3))

    def lookup_loss(v_, d_):
        pyr = correlation.build_pyramid(CorrelationVolume(v_), n_levels=2, radius=1)
        feat = correlation.pyramid_lookup(pyr, DisparityMap(values=d_))
        return tsum(feat * r)

    reports.append(grad_check(lookup_loss, [vals, disp], tolerance,
                              name="pyramid_lookup"))

    # one recurrent update step
    rp = refine.RefineParams.create(rng, corr_width=4, context_ch=3,
                                    hidden_dim=4, n_levels=2, motion_ch=4)
    context = _const(rng, (3, 4, 4))
    corr_feat = _const(rng, (4, 4, 4))
    disp = Tensor(rng.uniform(0.5, 2.5, (4, 4)))
    r = _const(rng, (4, 4))

    def lstm_loss(ctx, cf, d_):
        state = refine.init_state(ctx, rp)
        _, delta = refine.lstm_update(state, ctx, cf, DisparityMap(values=d_), rp)
        return tsum(delta.values * r)

    reports.append(grad_check(lstm_loss, [context, corr_feat, disp],
                              tolerance, name="lstm_update"))

    # sequence loss (errors kept away from the L1 and smooth-L1 kinks)
    gt_vals = rng.uniform(2.0, 6.0, (4, 4))
    signs = rng.choice([-1.0, 1.0], (3, 4, 4))
    offs = rng.uniform(0.2, 0.7, (3, 4, 4)) * signs
    gt = DisparityMap(values=Tensor(gt_vals))
    d0 = Tensor(gt_vals + offs[0])
    p1, p2 = Tensor(gt_vals + offs[1]), Tensor(gt_vals + offs[2])

    def seq_loss(d0_, p1_, p2_):
        preds = [DisparityMap(values=p1_), DisparityMap(values=p2_)]
        return refine.sequence_loss(preds, DisparityMap(values=d0_), gt, 0.9)

    reports.append(grad_check(seq_loss, [d0, p1, p2], tolerance,
                              name="sequence_loss"))
    return reports


def equivalence_suite(trials=100, seed=666, tol=1e-12):
    """Check dak(A)*V == V + elu(A)*V, raw and end-to-end through MKOI.

    Returns (max_raw_dev, max_mkoi_dev).
    """
    rng = np.random.default_rng(seed)
    max_raw = 0.0
    max_mkoi = 0.0
    params = MkoiParams.create(rng, 8)
    for _ in range(trials):
        a = Tensor(rng.standard_normal((8, 5, 5)))
        v = Tensor(rng.standard_normal((8, 5, 5)))
        lhs = dense_kernel(a) * v
        rhs = v + elu(a) * v
        max_raw = max(max_raw, float(np.abs(lhs.data - rhs.data).max()))
        out_a = attention.mkoi(a, v, params, decoupled=False)
        out_b = attention.mkoi(a, v, params, decoupled=True)
        max_mkoi = max(max_mkoi, float(np.abs(out_a.data - out_b.data).max()))
    return max_raw, max_mkoi
