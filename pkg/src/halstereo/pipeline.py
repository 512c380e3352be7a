"""Full stereo model: encoder, correlation volume, recurrent refinement.

Also holds the AdamW trainer and the desk-scale toy training loop used for
end-to-end verification on synthetic random-dot pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import ConvLayer, EncoderConfig, EncoderParams, encoder_forward, gelu
from .config import Config
from .correlation import (
    RegularizerParams,
    build_gwc_volume,
    build_pyramid,
    regularize_volume,
    soft_argmin_init,
)
from .data import StereoSample, apply_illposed_patch, gen_rds
from .disparity import DisparityMap
from .metrics import epe
from .refine import RefineParams, refine_disparity, sequence_loss
from .tensor import (
    ConvSpec,
    concat,
    no_grad,
    reshape,
    upsample2x_nearest,
    upsample_bilinear,
)


@dataclass
class ModelParams:
    encoder: EncoderParams
    fuse_conv: ConvLayer
    context_conv: ConvLayer
    regularizer: RegularizerParams
    refine: RefineParams
    n_groups: int
    corr_levels: int
    corr_radius: int
    field_factor: int
    max_disp: int
    kernel: str = "dak"

    @classmethod
    def create(cls, rng, cfg: Config, toy=False, kernel="dak", in_channels=1):
        scales = cfg.toy_encoder_scales if toy else cfg.encoder_scales
        blocks = cfg.toy_blocks_per_scale if toy else cfg.blocks_per_scale
        max_disp = cfg.toy_max_disp if toy else cfg.max_disp
        enc_cfg = EncoderConfig(scales=[tuple(s) for s in scales],
                                blocks_per_scale=blocks)
        if enc_cfg.scales[0][1] != cfg.field_factor:
            raise ValueError("finest encoder scale must match the field factor")
        encoder = EncoderParams.create(rng, enc_cfg, in_channels)
        feat_ch = enc_cfg.scales[0][0]
        total_ch = sum(ch for ch, _ in enc_cfg.scales)
        corr_width = cfg.corr_levels * (2 * cfg.corr_radius + 1) * cfg.n_groups
        return cls(
            encoder=encoder,
            fuse_conv=ConvLayer.create(rng, ConvSpec(1, total_ch, feat_ch)),
            context_conv=ConvLayer.create(rng, ConvSpec(3, feat_ch, cfg.context_dim)),
            regularizer=RegularizerParams.create(rng, cfg.n_groups, cfg.reg_hidden),
            refine=RefineParams.create(rng, corr_width, cfg.context_dim,
                                       hidden_dim=cfg.hidden_dim,
                                       n_levels=cfg.n_hidden_levels,
                                       motion_ch=cfg.motion_dim),
            n_groups=cfg.n_groups,
            corr_levels=cfg.corr_levels,
            corr_radius=cfg.corr_radius,
            field_factor=cfg.field_factor,
            max_disp=max_disp,
            kernel=kernel,
        )

    def parameters(self):
        return (self.encoder.parameters() + self.fuse_conv.parameters()
                + self.context_conv.parameters()
                + self.regularizer.parameters() + self.refine.parameters())


@dataclass
class ModelOutput:
    d0_field: DisparityMap
    d0_full: DisparityMap
    field_preds: list
    full_preds: list


def _fuse_scales(feats, params: ModelParams):
    """All encoder scales upsampled to the finest grid, concatenated and
    mixed by a 1x1 convolution. Feeds the context path only: matching uses
    the finest scale alone so coarse, blocky features cannot blur the
    correlation volume."""
    aligned = []
    for lev, feat in enumerate(feats):
        for _ in range(lev):
            feat = upsample2x_nearest(feat)
        aligned.append(feat)
    return gelu(params.fuse_conv(concat(aligned, axis=0)))


def forward(params: ModelParams, sample: StereoSample, n_iters):
    """Run the full pipeline on one stereo pair."""
    f = params.field_factor
    feats_l = encoder_forward(sample.left, params.encoder, kernel=params.kernel)
    feat_l = feats_l[0]
    feat_r = encoder_forward(sample.right, params.encoder,
                             kernel=params.kernel)[0]
    n_disp = max(params.max_disp // f, 1)
    vol = build_gwc_volume(feat_l, feat_r, n_disp, params.n_groups)
    vol = regularize_volume(vol, params.regularizer)
    d0 = soft_argmin_init(vol)
    pyr = build_pyramid(vol, params.corr_levels, params.corr_radius)
    context = gelu(params.context_conv(_fuse_scales(feats_l, params)))
    valid_full = sample.gt_disp.valid
    field_preds, full_preds = refine_disparity(d0, pyr, context, n_iters,
                                               params.refine,
                                               full_valid=valid_full)
    h, w = d0.shape
    d0_up = reshape(upsample_bilinear(reshape(d0.values, 1, h, w), f),
                    f * h, f * w) * float(f)
    d0_full = DisparityMap(values=d0_up, valid=valid_full)
    return ModelOutput(d0_field=d0, d0_full=d0_full,
                       field_preds=field_preds, full_preds=full_preds)


def sample_loss(params: ModelParams, sample: StereoSample, n_iters, gamma=0.9):
    out = forward(params, sample, n_iters)
    return sequence_loss(out.full_preds, out.d0_full, sample.gt_disp, gamma=gamma)


def save_model(params: ModelParams, cfg: Config, path, toy=True):
    """Checkpoint as npz: flat parameter arrays plus the config JSON."""
    import json

    arrays = {f"p{i}": t.data for i, t in enumerate(params.parameters())}
    meta = json.dumps({"cfg": cfg.to_dict(), "kernel": params.kernel, "toy": toy})
    np.savez(path, meta=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_model(path):
    import json

    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        cfg = Config.from_dict(meta["cfg"])
        params = ModelParams.create(np.random.default_rng(0), cfg,
                                    toy=meta["toy"], kernel=meta["kernel"])
        for i, t in enumerate(params.parameters()):
            arr = z[f"p{i}"]
            if arr.shape != t.shape:
                raise ValueError("checkpoint does not match the model layout")
            t.data = np.ascontiguousarray(arr)
    return params, cfg


class AdamW:
    """Decoupled weight-decay Adam over a flat tensor list."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm=1.0):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _degrade(sample, rng, h, w):
    """Stamp one ill-posed rectangle (alternating kind) on half the samples."""
    if rng.random() < 0.5:
        return sample
    ph, pw = h // 4, w // 4
    rect = (int(rng.integers(0, h - ph)), int(rng.integers(0, w - pw)), ph, pw)
    kind = "textureless" if rng.random() < 0.5 else "specular"
    return apply_illposed_patch(sample, kind, rect)


def make_toy_dataset(cfg: Config, seed):
    """Deterministic train/validation split of random-dot stereo pairs.

    Half the samples carry a textureless or specular rectangle so that
    matching is locally ambiguous there and context has to resolve it.
    """
    h, w, md = cfg.toy_h, cfg.toy_w, cfg.toy_max_disp
    rng = np.random.default_rng(seed * 7919 + 13)
    train = [_degrade(gen_rds(h, w, md, seed * 100003 + i), rng, h, w)
             for i in range(cfg.toy_train_samples)]
    val = [_degrade(gen_rds(h, w, md, seed * 100003 + 50000 + i), rng, h, w)
           for i in range(cfg.toy_val_samples)]
    return train, val


def evaluate(params: ModelParams, samples, n_iters):
    """Mean end-point error of the final full-resolution prediction."""
    errs = []
    with no_grad():
        for sample in samples:
            out = forward(params, sample, n_iters)
            errs.append(epe(out.full_preds[-1], sample.gt_disp))
    return float(np.mean(errs))


def train_toy(cfg: Config, seed=None, kernel="dak", steps=None, log=None):
    """Short end-to-end training run on synthetic pairs.

    Returns (params, history) where history maps step -> validation EPE.
    """
    seed = cfg.seed if seed is None else seed
    steps = cfg.toy_steps if steps is None else steps
    rng = np.random.default_rng(seed)
    params = ModelParams.create(rng, cfg, toy=True, kernel=kernel)
    train, val = make_toy_dataset(cfg, seed)
    opt = AdamW(params.parameters(), lr=cfg.toy_lr,
                weight_decay=cfg.weight_decay)
    order = rng.permutation(len(train))
    cursor = 0
    history = {}
    eval_every = max(steps // 6, 1)
    warmup = max(steps // 10, 1)
    for step in range(1, steps + 1):
        # linear warmup then cosine decay to zero
        if step <= warmup:
            opt.lr = cfg.toy_lr * step / warmup
        else:
            frac = (step - warmup) / max(steps - warmup, 1)
            opt.lr = cfg.toy_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
        opt.zero_grad()
        batch_loss = 0.0
        for _ in range(cfg.toy_batch):
            sample = train[order[cursor]]
            cursor += 1
            if cursor == len(order):
                order = rng.permutation(len(train))
                cursor = 0
            loss = sample_loss(params, sample, cfg.toy_train_iters)
            loss = loss * (1.0 / cfg.toy_batch)
            loss.backward()
            batch_loss += loss.item()
        clip_grad_norm(params.parameters(), 5.0)
        opt.step()
        if step % eval_every == 0 or step == steps:
            val_epe = evaluate(params, val, cfg.toy_train_iters)
            history[step] = val_epe
            if log:
                log(f"step {step:5d}  loss {batch_loss:8.4f}  val EPE {val_epe:6.3f}")
    return params, history
