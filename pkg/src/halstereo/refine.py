"""Recurrent LSTM-structured disparity refinement and the sequence loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import ConvLayer
from .correlation import CorrPyramid, pyramid_lookup
from .disparity import DisparityMap
from .tensor import (
    ConvSpec,
    Tensor,
    absolute,
    avg_pool2d,
    concat,
    gelu,
    pad,
    reshape,
    sigmoid,
    softmax,
    tanh,
    transpose,
    tsum,
    upsample2x_nearest,
    where_mask,
)

SMOOTH_L1_BETA = 1.0
UPSAMPLE_FACTOR = 4


@dataclass
class RecurrentState:
    """Hidden and cell maps, one pair per resolution level (finest first)."""

    hidden: list[Tensor]
    cell: list[Tensor]

    def __post_init__(self):
        if len(self.hidden) != len(self.cell):
            raise ValueError("hidden and cell level counts differ")
        for h, c in zip(self.hidden, self.cell):
            if h.shape != c.shape:
                raise ValueError("hidden/cell shapes differ")


@dataclass
class RefineParams:
    """Weights of the recurrent update operator and its output heads."""

    motion_conv1: ConvLayer
    motion_conv2: ConvLayer
    init_convs: list[ConvLayer]
    gate_convs: list[ConvLayer]
    delta_conv1: ConvLayer
    delta_conv2: ConvLayer
    mask_conv1: ConvLayer
    mask_conv2: ConvLayer
    hidden_dim: int
    n_levels: int

    @classmethod
    def create(cls, rng, corr_width, context_ch, hidden_dim=32, n_levels=3,
               motion_ch=32, zero_delta=False):
        hd = hidden_dim
        gate_in = []
        for lev in range(n_levels):
            ch = hd  # own hidden
            if lev == 0:
                ch += context_ch + motion_ch
            if lev > 0:
                ch += hd  # pooled finer hidden
            if lev < n_levels - 1:
                ch += hd  # upsampled coarser hidden
            gate_in.append(ch)
        return cls(
            motion_conv1=ConvLayer.create(rng, ConvSpec(3, 1 + corr_width, motion_ch)),
            motion_conv2=ConvLayer.create(rng, ConvSpec(3, motion_ch, motion_ch)),
            init_convs=[ConvLayer.create(rng, ConvSpec(3, context_ch, hd))
                        for _ in range(n_levels)],
            gate_convs=[ConvLayer.create(rng, ConvSpec(3, gate_in[lev], 4 * hd))
                        for lev in range(n_levels)],
            delta_conv1=ConvLayer.create(rng, ConvSpec(3, hd, hd)),
            delta_conv2=ConvLayer.create(rng, ConvSpec(3, hd, 1), zero=zero_delta),
            mask_conv1=ConvLayer.create(rng, ConvSpec(3, hd, hd)),
            mask_conv2=ConvLayer.create(rng, ConvSpec(1, hd, 9 * UPSAMPLE_FACTOR ** 2,
                                                      bias=True)),
            hidden_dim=hd,
            n_levels=n_levels,
        )

    def parameters(self):
        out = (self.motion_conv1.parameters() + self.motion_conv2.parameters()
               + self.delta_conv1.parameters() + self.delta_conv2.parameters()
               + self.mask_conv1.parameters() + self.mask_conv2.parameters())
        for layer in self.init_convs + self.gate_convs:
            out += layer.parameters()
        return out


def init_state(context, params: RefineParams) -> RecurrentState:
    """Hidden states seeded from pooled context; cells start at zero."""
    hidden, cell = [], []
    ctx = context
    for lev in range(params.n_levels):
        h = tanh(params.init_convs[lev](ctx))
        hidden.append(h)
        cell.append(Tensor(np.zeros(h.shape)))
        if lev < params.n_levels - 1:
            ctx = avg_pool2d(ctx)
    return RecurrentState(hidden=hidden, cell=cell)


def lstm_update(state: RecurrentState, context, corr_feat, disp: DisparityMap,
                params: RefineParams):
    """One convolutional LSTM step; returns the new state and a delta map."""
    H, W = disp.shape
    disp_ch = reshape(disp.values, 1, H, W)
    motion = params.motion_conv2(gelu(params.motion_conv1(
        concat([disp_ch, corr_feat], axis=0))))
    hd = params.hidden_dim
    new_hidden, new_cell = [], []
    for lev in range(params.n_levels):
        parts = [state.hidden[lev]]
        if lev == 0:
            parts.append(context)
            parts.append(motion)
        if lev > 0:
            parts.append(avg_pool2d(state.hidden[lev - 1]))
        if lev < params.n_levels - 1:
            parts.append(upsample2x_nearest(state.hidden[lev + 1]))
        gates = params.gate_convs[lev](concat(parts, axis=0))
        i = sigmoid(gates[:hd])
        f = sigmoid(gates[hd:2 * hd])
        o = sigmoid(gates[2 * hd:3 * hd])
        cand = tanh(gates[3 * hd:])
        c_new = f * state.cell[lev] + i * cand
        new_cell.append(c_new)
        new_hidden.append(o * tanh(c_new))
    delta = params.delta_conv2(gelu(params.delta_conv1(new_hidden[0])))
    delta_map = DisparityMap(values=reshape(delta, H, W), valid=disp.valid)
    return RecurrentState(hidden=new_hidden, cell=new_cell), delta_map


def _unfold3x3(x):
    """(1, H, W) -> (9, H, W) of zero-padded 3x3 neighbourhoods."""
    _, H, W = x.shape
    xp = pad(x, ((0, 0), (1, 1), (1, 1)))
    patches = [xp[:, i:i + H, j:j + W] for i in range(3) for j in range(3)]
    return concat(patches, axis=0)


def convex_upsample(disp_values, mask_logits, factor=UPSAMPLE_FACTOR):
    """Upsample (H, W) disparities by learned convex 3x3 combinations.

    ``mask_logits`` is (9*factor^2, H, W); softmax over the 9 neighbours
    yields per-subpixel convex weights. Output values scale by ``factor``.
    """
    H, W = disp_values.shape
    f2 = factor * factor
    mask = softmax(reshape(mask_logits, 9, f2, H, W), axis=0)
    patches = reshape(_unfold3x3(reshape(disp_values, 1, H, W)), 9, 1, H, W)
    mixed = tsum(mask * patches, axis=0)  # (f2, H, W)
    grid = reshape(mixed, factor, factor, H, W)
    up = reshape(transpose(grid, (2, 0, 3, 1)), factor * H, factor * W)
    return up * float(factor)


def refine_disparity(d0: DisparityMap, pyr: CorrPyramid, context, n_iters,
                     params: RefineParams, state: RecurrentState | None = None,
                     full_valid=None):
    """Iteratively add LSTM-predicted increments to the disparity.

    Returns (field_preds, full_preds): the n_iters field-resolution maps and
    their convex-upsampled full-resolution counterparts.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if state is None:
        state = init_state(context, params)
    disp = d0
    field_preds, full_preds = [], []
    for _ in range(n_iters):
        corr_feat = pyramid_lookup(pyr, disp)
        state, delta = lstm_update(state, context, corr_feat, disp, params)
        disp = DisparityMap(values=disp.values + delta.values, valid=disp.valid)
        field_preds.append(disp)
        mask_logits = params.mask_conv2(gelu(params.mask_conv1(state.hidden[0])))
        up = convex_upsample(disp.values, mask_logits)
        valid = full_valid if full_valid is not None else None
        full_preds.append(DisparityMap(values=up, valid=valid))
    return field_preds, full_preds


def masked_mean(x, mask):
    count = float(mask.sum())
    if count == 0:
        raise ValueError("empty valid mask")
    return tsum(x * mask.astype(np.float64)) * (1.0 / count)


def smooth_l1(err, beta=SMOOTH_L1_BETA):
    a = absolute(err)
    return where_mask(a.data < beta, (0.5 / beta) * a * a, a - 0.5 * beta)


def sequence_loss(preds, d0: DisparityMap, gt: DisparityMap, gamma=0.9):
    """Smooth-L1 on the initial disparity plus decayed L1 over the iterates.

    The final iterate carries weight gamma^0 = 1; earlier iterates decay
    geometrically. Each term averages over the ground-truth valid mask.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    mask = gt.valid
    n = len(preds)
    loss = masked_mean(smooth_l1(d0.values - gt.values), mask)
    for i, pred in enumerate(preds, start=1):
        w = gamma ** (n - i)
        loss = loss + w * masked_mean(absolute(pred.values - gt.values), mask)
    return loss
