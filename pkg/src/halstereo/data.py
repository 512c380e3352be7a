"""Synthetic random-dot stereo pairs with exact ground truth, plus PFM I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .disparity import DisparityMap
from .tensor import Tensor


@dataclass
class StereoSample:
    left: Tensor   # (1, H, W) in [0, 1]
    right: Tensor  # (1, H, W) in [0, 1]
    gt_disp: DisparityMap
    seed: int
    max_disp: int


def _smooth_disparity_field(rng, h, w, max_disp):
    """Plane plus a few Gaussian bumps, quantized to whole pixels."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = rng.uniform(0.15, 0.45) * max_disp
    field = (base
             + rng.uniform(-0.1, 0.1) * max_disp * xs / max(w - 1, 1)
             + rng.uniform(-0.1, 0.1) * max_disp * ys / max(h - 1, 1))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sy = rng.uniform(h / 8, h / 3)
        sx = rng.uniform(w / 8, w / 3)
        amp = rng.uniform(-0.35, 0.45) * max_disp
        field += amp * np.exp(-(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2))
    field = np.clip(field, 0, max_disp)
    # integer disparities keep the left/right warp exactly consistent
    return np.rint(field)


def gen_rds(h, w, max_disp, seed) -> StereoSample:
    """Random-dot stereogram with a smooth disparity field and occlusions.

    Valid pixels satisfy left(y, x) == right(y, x - d(y, x)) exactly; pixels
    whose target leaves the image or loses the z-buffer test are invalid.
    """
    if max_disp > w / 4:
        raise ValueError("max_disp must not exceed a quarter of the width")
    rng = np.random.default_rng(seed)
    disp = _smooth_disparity_field(rng, h, w, max_disp)
    left = rng.random((h, w))
    right = rng.random((h, w))  # background noise fills disoccluded holes
    valid = np.zeros((h, w), dtype=bool)
    d_int = disp.astype(int)
    cols = np.arange(w)
    for y in range(h):
        target = cols - d_int[y]
        inside = target >= 0
        zbuf = np.full(w, -1.0)
        np.maximum.at(zbuf, target[inside], d_int[y][inside])
        vis = inside & (d_int[y] == zbuf[np.clip(target, 0, w - 1)])
        right[y, target[vis]] = left[y, vis]
        valid[y] = vis
    return StereoSample(
        left=Tensor(left[None]),
        right=Tensor(right[None]),
        gt_disp=DisparityMap(values=Tensor(disp), valid=valid),
        seed=int(seed),
        max_disp=int(max_disp),
    )


def apply_illposed_patch(sample: StereoSample, kind, rect, seed=0) -> StereoSample:
    """Degrade a rectangle: 'textureless' flattens both views to their mean,
    'specular' overwrites the left view with a saturating gradient.
    Ground truth is untouched."""
    y0, x0, ph, pw = rect
    _, h, w = sample.left.shape
    if y0 < 0 or x0 < 0 or y0 + ph > h or x0 + pw > w:
        raise ValueError("rect out of bounds")
    if ph == 0 or pw == 0:
        return sample
    left = sample.left.data.copy()
    right = sample.right.data.copy()
    sl = (slice(None), slice(y0, y0 + ph), slice(x0, x0 + pw))
    if kind == "textureless":
        left[sl] = left[sl].mean()
        right[sl] = right[sl].mean()
    elif kind == "specular":
        ramp = np.linspace(0.6, 1.0, pw)
        left[sl] = np.broadcast_to(ramp, (1, ph, pw))
    else:
        raise ValueError(f"unknown degradation kind {kind!r}")
    return replace(sample, left=Tensor(left), right=Tensor(right))


# -- PFM format -------------------------------------------------------------


def write_pfm(d: DisparityMap, path):
    """Grayscale little-endian PFM, rows bottom-to-top, scale header -1.0."""
    values = np.asarray(d.values.data, dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise ValueError("PFM requires finite values")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(values).astype("<f4").tobytes())


def read_pfm(path) -> DisparityMap:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            raise ValueError("color PFM not supported; expected grayscale 'Pf'")
        if header != b"Pf":
            raise ValueError(f"malformed PFM header {header!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError("malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise ValueError("truncated PFM body")
        dtype = "<f4" if scale < 0 else ">f4"
        values = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return DisparityMap(values=Tensor(np.flipud(values).astype(np.float64)))


# -- sample directories -----------------------------------------------------

INVALID_SENTINEL = -1.0


def save_sample(sample: StereoSample, directory):
    """Write {left,right,disp}.pfm and meta.json; invalid disparity is -1."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pfm(DisparityMap(values=Tensor(sample.left.data[0])), directory / "left.pfm")
    write_pfm(DisparityMap(values=Tensor(sample.right.data[0])), directory / "right.pfm")
    disp = sample.gt_disp.values.data.copy()
    disp[~sample.gt_disp.valid] = INVALID_SENTINEL
    write_pfm(DisparityMap(values=Tensor(disp)), directory / "disp.pfm")
    meta = {"seed": sample.seed, "max_disp": sample.max_disp}
    (directory / "meta.json").write_text(json.dumps(meta))


def load_sample(directory) -> StereoSample:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    left = read_pfm(directory / "left.pfm").values.data
    right = read_pfm(directory / "right.pfm").values.data
    disp = read_pfm(directory / "disp.pfm").values.data
    valid = disp >= 0
    disp = np.where(valid, disp, 0.0)
    return StereoSample(
        left=Tensor(left[None]),
        right=Tensor(right[None]),
        gt_disp=DisparityMap(values=Tensor(disp), valid=valid),
        seed=int(meta["seed"]),
        max_disp=int(meta["max_disp"]),
    )
