"""Hadamard-product self-attention encoder.

The attention map is the channel-normalized Hadamard product of Q and K,
pushed through a strictly positive elementwise kernel and mixed with the
value path by multi-kernel grouped convolutions. A quadratic softmax
baseline is kept alongside for cost and rank comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvSpec,
    Tensor,
    concat,
    conv2d,
    dense_kernel,
    elu,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

# The kernel op under its domain name.
dak = dense_kernel


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class ConvLayer:
    """A ConvSpec bundled with its weights."""

    spec: ConvSpec
    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def create(cls, rng, spec: ConvSpec, zero=False):
        if zero:
            w = Tensor(np.zeros(spec.weight_shape), requires_grad=True)
        else:
            k = spec.kernel_size
            fan_in = (spec.in_channels // spec.groups) * k * k
            w = kaiming_uniform(rng, spec.weight_shape, fan_in)
        b = None
        if spec.bias:
            b = Tensor(np.zeros(spec.out_channels), requires_grad=True)
        return cls(spec=spec, weight=w, bias=b)

    def __call__(self, x):
        return conv2d(x, self.spec, self.weight, self.bias)

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


@dataclass
class QKVTriple:
    q: Tensor
    k: Tensor
    v: Tensor


@dataclass
class MkoiParams:
    """Channel expansion, per-group value convolutions and the fuse layer.

    Branch m in {0,1,2} uses kernel size 2m+3 and c/2^m output channels, so
    the three branches concatenate to 7c/4 channels.
    """

    expand: ConvLayer
    branch_convs: list[ConvLayer]
    fuse: ConvLayer

    @classmethod
    def create(cls, rng, c, zero_fuse=False):
        if c % 4:
            raise ValueError("channel count must be divisible by 4")
        expand = ConvLayer.create(rng, ConvSpec(1, c, 7 * c // 4))
        branches = [
            ConvLayer.create(rng, ConvSpec(2 * m + 3, c, c // 2 ** m))
            for m in range(3)
        ]
        fuse = ConvLayer.create(rng, ConvSpec(1, 7 * c // 4, c), zero=zero_fuse)
        return cls(expand=expand, branch_convs=branches, fuse=fuse)

    @property
    def channels(self):
        return self.expand.spec.in_channels

    def parameters(self):
        out = self.expand.parameters() + self.fuse.parameters()
        for layer in self.branch_convs:
            out += layer.parameters()
        return out


@dataclass
class SgffParams:
    proj_in: ConvLayer
    gate_conv: ConvLayer
    value_conv: ConvLayer
    proj_out: ConvLayer

    @classmethod
    def create(cls, rng, c, zero_out=False):
        return cls(
            proj_in=ConvLayer.create(rng, ConvSpec(1, c, c)),
            gate_conv=ConvLayer.create(rng, ConvSpec(3, c, c)),
            value_conv=ConvLayer.create(rng, ConvSpec(3, c, c)),
            proj_out=ConvLayer.create(rng, ConvSpec(1, c, c), zero=zero_out),
        )

    def parameters(self):
        return (self.proj_in.parameters() + self.gate_conv.parameters()
                + self.value_conv.parameters() + self.proj_out.parameters())


@dataclass
class BlockParams:
    qkv_proj: ConvLayer
    mkoi: MkoiParams
    ln_gain: Tensor
    ln_offset: Tensor
    sgff: SgffParams

    @classmethod
    def create(cls, rng, c, zero_out=False):
        return cls(
            qkv_proj=ConvLayer.create(rng, ConvSpec(1, c, 3 * c)),
            mkoi=MkoiParams.create(rng, c, zero_fuse=zero_out),
            ln_gain=Tensor(np.ones(c), requires_grad=True),
            ln_offset=Tensor(np.zeros(c), requires_grad=True),
            sgff=SgffParams.create(rng, c, zero_out=zero_out),
        )

    def parameters(self):
        return (self.qkv_proj.parameters() + self.mkoi.parameters()
                + [self.ln_gain, self.ln_offset] + self.sgff.parameters())


def project_qkv(v_init, proj: ConvLayer) -> QKVTriple:
    """1x1-project to 3c channels and split evenly into (Q, K, V)."""
    c = v_init.shape[0]
    if proj.spec.in_channels != c or proj.spec.out_channels != 3 * c:
        raise ValueError("qkv projection must map c -> 3c")
    stacked = proj(v_init)
    return QKVTriple(q=stacked[:c], k=stacked[c:2 * c], v=stacked[2 * c:])


def hadamard_attention(q, k):
    """Elementwise attention map of channel-normalized Q and K."""
    if q.shape != k.shape:
        raise ValueError("q and k must share a shape")
    return l2_normalize(q, 0) * l2_normalize(k, 0)


def _group_slices(c):
    widths = [c, c // 2, c // 4]
    offsets = np.cumsum([0] + widths)
    return [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]


def _apply_kernel(a_g, kernel):
    if kernel == "dak":
        return dak(a_g)
    if kernel == "softmax":
        # per-channel softmax over space, rescaled to unit mean so the
        # ablation compares kernel shapes rather than silently attenuating
        # the whole attention branch by 1/(H*W)
        cg, H, W = a_g.shape
        sm = softmax(reshape(a_g, cg, H * W), axis=1)
        return reshape(sm, cg, H, W) * float(H * W)
    raise ValueError(f"unknown attention kernel {kernel!r}")


def mkoi(a_pre, v, params: MkoiParams, decoupled=False, kernel="dak"):
    """Multi-kernel grouped interaction between attention map and value.

    The attention map is expanded to 7c/4 channels, split into groups of
    width (c, c/2, c/4), pushed through the dense kernel and multiplied with
    matching grouped convolutions of the value. With ``decoupled=True`` the
    per-group product dak(a) * v is computed as v + elu(a) * v instead; the
    two forms agree to rounding. ``kernel='softmax'`` swaps the dense kernel
    for a per-channel spatial softmax (ablation baseline).
    """
    c = params.channels
    if a_pre.shape[0] != c or v.shape[0] != c:
        raise ValueError("attention/value channel mismatch")
    expanded = params.expand(a_pre)
    groups = []
    for sl, layer in zip(_group_slices(c), params.branch_convs):
        a_g = expanded[sl]
        v_g = layer(v)
        if decoupled:
            groups.append(v_g + elu(a_g) * v_g)
        else:
            groups.append(_apply_kernel(a_g, kernel) * v_g)
    return params.fuse(concat(groups, axis=0))


def hpsa(triple: QKVTriple, params: MkoiParams, decoupled=False, kernel="dak"):
    """Hadamard-product self-attention: dense-kernel map applied via MKOI."""
    return mkoi(hadamard_attention(triple.q, triple.k), triple.v, params,
                decoupled=decoupled, kernel=kernel)


def vanilla_sa(triple: QKVTriple, heads=4):
    """Quadratic softmax(QK^T/sqrt(d_k))V baseline over flattened tokens."""
    c, H, W = triple.q.shape
    if c % heads:
        raise ValueError("channels must divide evenly into heads")
    n = H * W
    dk = c // heads
    qt = transpose(reshape(triple.q, c, n))  # (n, c)
    kt = transpose(reshape(triple.k, c, n))
    vt = transpose(reshape(triple.v, c, n))
    outs = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        logits = matmul(qt[:, sl], transpose(kt[:, sl])) * (1.0 / np.sqrt(dk))
        attn = softmax(logits, axis=1)
        outs.append(matmul(attn, vt[:, sl]))
    out = concat(outs, axis=1)
    return reshape(transpose(out), c, H, W)


def sgff(v, params: SgffParams):
    """Gated feed-forward: GELU(conv3(x)) * conv3(x) around 1x1 projections."""
    x = params.proj_in(v)
    gated = gelu(params.gate_conv(x)) * params.value_conv(x)
    return params.proj_out(gated)


def transformer_block(v_i, params: BlockParams, kernel="dak"):
    """Residual attention block followed by a gated feed-forward residual."""
    b = v_i + hpsa(project_qkv(v_i, params.qkv_proj), params.mkoi, kernel=kernel)
    return b + sgff(layer_norm(b, params.ln_gain, params.ln_offset), params.sgff)


# -- multi-scale encoder ----------------------------------------------------


@dataclass
class EncoderConfig:
    """Channel widths and downsample factors, finest first."""

    scales: list[tuple[int, int]] = field(
        default_factory=lambda: [(64, 4), (128, 8), (192, 16)])
    blocks_per_scale: int = 2

    def __post_init__(self):
        factors = [f for _, f in self.scales]
        if any(b <= a for a, b in zip(factors, factors[1:])):
            raise ValueError("downsample factors must be strictly increasing")
        if any(c % 4 for c, _ in self.scales):
            raise ValueError("channel counts must be divisible by 4")


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    stem: list[ConvLayer]
    downsamples: list[ConvLayer | None]
    blocks: list[list[BlockParams]]

    @classmethod
    def create(cls, rng, cfg: EncoderConfig, in_channels):
        c0, f0 = cfg.scales[0]
        if f0 & (f0 - 1):
            raise ValueError("downsample factors must be powers of two")
        stem = []
        ch = in_channels
        n_stem = int(np.log2(f0))
        if n_stem == 0 and in_channels != c0:
            raise ValueError("factor-1 first scale requires matching channels")
        for i in range(n_stem):
            stem.append(ConvLayer.create(rng, ConvSpec(3, ch, c0, stride=2)))
            ch = c0
        downsamples: list[ConvLayer | None] = [None]
        blocks = [[BlockParams.create(rng, c0) for _ in range(cfg.blocks_per_scale)]]
        prev_c, prev_f = c0, f0
        for c, f in cfg.scales[1:]:
            stride = f // prev_f
            downsamples.append(ConvLayer.create(rng, ConvSpec(3, prev_c, c, stride=stride)))
            blocks.append([BlockParams.create(rng, c) for _ in range(cfg.blocks_per_scale)])
            prev_c, prev_f = c, f
        return cls(cfg=cfg, stem=stem, downsamples=downsamples, blocks=blocks)

    def parameters(self):
        out = []
        for layer in self.stem:
            out += layer.parameters()
        for ds in self.downsamples:
            if ds is not None:
                out += ds.parameters()
        for scale_blocks in self.blocks:
            for blk in scale_blocks:
                out += blk.parameters()
        return out


def encoder_forward(image_features, params: EncoderParams, kernel="dak"):
    """Downsample, then run transformer blocks per scale; finest first."""
    _, H, W = image_features.shape
    for _, f in params.cfg.scales:
        if H % f or W % f:
            raise ValueError("spatial dims must divide all downsample factors")
    x = image_features
    for layer in params.stem:
        x = gelu(layer(x))
    outputs = []
    for ds, scale_blocks in zip(params.downsamples, params.blocks):
        if ds is not None:
            x = gelu(ds(x))
        for blk in scale_blocks:
            x = transformer_block(x, blk, kernel=kernel)
        outputs.append(x)
    return outputs
