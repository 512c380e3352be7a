"""Group-wise correlation volume, its pyramid, and disparity lookups.

The volume scores each left pixel against right-image candidates shifted
by d pixels: values[g, d, h, w] = <f_l^g(h,w), f_r^g(h,w-d)> / (N_c/N_g),
zero where the shifted position falls outside the right view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .disparity import DisparityMap
from .tensor import (
    Tensor,
    avg_pool_axis,
    concat,
    conv3d,
    elu,
    pad,
    reshape,
    sample_axis1_linear,
    softmax,
    tmean,
    tsum,
)


@dataclass
class CorrelationVolume:
    values: Tensor  # (groups, disparities, H, W)

    @property
    def n_groups(self):
        return self.values.shape[0]

    @property
    def n_disp(self):
        return self.values.shape[1]


def build_gwc_volume(f_l, f_r, max_disp, n_groups):
    """Group-wise correlation between left and right feature maps."""
    if f_l.shape != f_r.shape:
        raise ValueError("feature maps must share a shape")
    c, H, W = f_l.shape
    if c % n_groups:
        raise ValueError("channels must divide evenly into groups")
    if max_disp < 1 or max_disp > W:
        raise ValueError("max_disp must be in [1, width]")
    cg = c // n_groups
    slices = []
    for d in range(max_disp):
        if d == 0:
            prod = f_l * f_r
        else:
            prod = f_l[:, :, d:] * f_r[:, :, :W - d]
        corr = tsum(reshape(prod, n_groups, cg, H, W - d), axis=1) * (1.0 / cg)
        if d:
            corr = pad(corr, ((0, 0), (0, 0), (d, 0)))
        slices.append(reshape(corr, n_groups, 1, H, W))
    return CorrelationVolume(values=concat(slices, axis=1))


@dataclass
class RegularizerParams:
    """Three-layer 3-D convolutional residual stack over (d, h, w)."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def create(cls, rng, n_groups, hidden=8):
        shapes = [
            (hidden, n_groups, 3, 3, 3),
            (hidden, hidden, 3, 3, 3),
            (n_groups, hidden, 3, 3, 3),
        ]
        weights = []
        for i, shp in enumerate(shapes):
            if i == len(shapes) - 1:
                w = np.zeros(shp)  # identity at init via the residual path
            else:
                fan_in = int(np.prod(shp[1:]))
                w = rng.uniform(-np.sqrt(6.0 / fan_in), np.sqrt(6.0 / fan_in), shp)
            weights.append(Tensor(w, requires_grad=True))
        biases = [Tensor(np.zeros(shp[0]), requires_grad=True) for shp in shapes]
        return cls(weights=weights, biases=biases)

    def parameters(self):
        return self.weights + self.biases


def regularize_volume(vol: CorrelationVolume, params: RegularizerParams):
    """Residual 3-D convolution stack; identity when the last layer is zero."""
    x = conv3d(vol.values, params.weights[0], params.biases[0])
    x = elu(x)
    x = conv3d(x, params.weights[1], params.biases[1])
    x = elu(x)
    x = conv3d(x, params.weights[2], params.biases[2])
    return CorrelationVolume(values=vol.values + x)


def soft_argmin_init(vol: CorrelationVolume) -> DisparityMap:
    """Softmax-weighted expected disparity over the group-mean volume."""
    scores = tmean(vol.values, axis=0)  # (D, H, W)
    weights = softmax(scores, axis=0)
    bins = Tensor(np.arange(vol.n_disp, dtype=np.float64).reshape(-1, 1, 1))
    return DisparityMap(values=tsum(weights * bins, axis=0))


@dataclass
class CorrPyramid:
    """Disparity-axis pyramid of a correlation volume plus lookup radius."""

    levels: list[CorrelationVolume]
    radius: int

    @property
    def feature_width(self):
        return len(self.levels) * (2 * self.radius + 1) * self.levels[0].n_groups


def build_pyramid(vol: CorrelationVolume, n_levels=2, radius=4) -> CorrPyramid:
    levels = [vol]
    for _ in range(n_levels - 1):
        levels.append(CorrelationVolume(values=avg_pool_axis(levels[-1].values, 1)))
    return CorrPyramid(levels=levels, radius=radius)


def pyramid_lookup(pyr: CorrPyramid, disp: DisparityMap):
    """Sample every level around the current disparity estimate.

    For level l the volume is probed at disp/2^l + offset for offsets in
    [-r, r] with linear interpolation along the disparity axis; samples
    outside the level are zero. Output width: levels * (2r+1) * groups.
    """
    feats = []
    for lev, volume in enumerate(pyr.levels):
        scale = 1.0 / (2 ** lev)
        for off in range(-pyr.radius, pyr.radius + 1):
            feats.append(sample_axis1_linear(volume.values, disp.values,
                                             scale=scale, offset=float(off)))
    return concat(feats, axis=0)
