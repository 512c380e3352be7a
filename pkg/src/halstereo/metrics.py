"""Disparity metrics, attention-rank analysis, and the scaling benchmark."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import attention
from .disparity import DisparityMap
from .tensor import Tensor, no_grad

SV_RELATIVE_THRESHOLD = 1e-10


def _shared_mask(pred: DisparityMap, gt: DisparityMap):
    mask = pred.valid & gt.valid
    if not mask.any():
        raise ValueError("empty valid mask")
    return mask


def epe(pred: DisparityMap, gt: DisparityMap) -> float:
    """Mean absolute disparity error over jointly valid pixels."""
    mask = _shared_mask(pred, gt)
    err = np.abs(pred.values.data - gt.values.data)
    return float(err[mask].mean())


def d1_rate(pred: DisparityMap, gt: DisparityMap, px_thresh=3.0, rel_thresh=0.05):
    """Percentage of valid pixels failing both the absolute and relative
    error thresholds (KITTI convention; rel_thresh=0 gives a pure pixel
    threshold)."""
    mask = _shared_mask(pred, gt)
    err = np.abs(pred.values.data - gt.values.data)[mask]
    gtv = np.abs(gt.values.data)[mask]
    bad = (err > px_thresh) & (err > rel_thresh * gtv)
    return 100.0 * float(bad.mean())


def rank_ratio(a) -> float:
    """Numerical rank over the row count, singular values gated at
    sigma_max * 1e-10."""
    mat = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("rank_ratio needs a 2-D matrix")
    m = mat.shape[0]
    if m == 0:
        raise ValueError("matrix has no rows")
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0.0
    rank = int(np.sum(sv > sv[0] * SV_RELATIVE_THRESHOLD))
    return rank / m


@dataclass
class RankReport:
    kernel: str
    trials: int
    c: int
    n: int
    mean_rank_ratio: float
    full_rank_trials: int
    sv_threshold_policy: str = "sigma_max * 1e-10"

    def to_dict(self):
        return asdict(self)


def _normalize_cols_channel(x):
    norm = np.sqrt((x * x).sum(axis=0, keepdims=True))
    norm = np.where(norm < 1e-6, 1.0, norm)
    return x / norm


def rank_experiment(kernel, trials, c, n, seed) -> RankReport:
    """Mean rank ratio of the post-kernel Hadamard attention map.

    Draws Q, K ~ N(0,1) of shape (c, n), normalizes along channels, takes
    the elementwise product and applies either the dense kernel or a
    softmax over the spatial axis.
    """
    if kernel not in ("dak", "softmax"):
        raise ValueError("kernel must be 'dak' or 'softmax'")
    rng = np.random.default_rng(seed)
    ratios = []
    full = 0
    for _ in range(trials):
        q = _normalize_cols_channel(rng.standard_normal((c, n)))
        k = _normalize_cols_channel(rng.standard_normal((c, n)))
        a = q * k
        if kernel == "dak":
            mapped = np.where(a >= 0, a + 1.0, np.exp(np.minimum(a, 0.0)))
        else:
            e = np.exp(a - a.max(axis=1, keepdims=True))
            mapped = e / e.sum(axis=1, keepdims=True)
        r = rank_ratio(mapped)
        ratios.append(r)
        full += r == 1.0
    return RankReport(kernel=kernel, trials=trials, c=c, n=n,
                      mean_rank_ratio=float(np.mean(ratios)),
                      full_rank_trials=int(full))


# -- scaling benchmark ------------------------------------------------------


@dataclass
class BenchRecord:
    method: str
    n: int
    c: int
    flops: int
    wall_ns: int


def hpsa_flops(n, c):
    """Exact multiply-add count of one HPSA application at n tokens.

    Covers the two channel normalizations, the Hadamard product, the 7c/4
    expansion, the per-group kernel and product, the three value branch
    convolutions, and the 1x1 fuse. Every term is linear in n.
    """
    norms = 2 * (2 * c * n + n)        # square-sum plus divide, per map
    hadamard = c * n
    expand = (7 * c // 4) * c * n + (7 * c // 4) * n
    kernel = (7 * c // 4) * n
    branches = sum((c // 2 ** m) * c * (2 * m + 3) ** 2 * n + (c // 2 ** m) * n
                   for m in range(3))
    group_product = (7 * c // 4) * n
    fuse = c * (7 * c // 4) * n + c * n
    return norms + hadamard + expand + kernel + branches + group_product + fuse


def vanilla_sa_flops(n, c, heads=4):
    """Exact multiply-add count of the quadratic baseline: per head, QK^T,
    the softmax, and the attention-value product."""
    dk = c // heads
    per_head = n * n * dk + n * n + 3 * n * n + n * n * dk
    return heads * per_head


def _time_method(method, c, n, reps, rng):
    s = int(round(np.sqrt(n)))
    if s * s != n:
        raise ValueError("token counts must be perfect squares")
    triple = attention.QKVTriple(
        q=Tensor(rng.standard_normal((c, s, s))),
        k=Tensor(rng.standard_normal((c, s, s))),
        v=Tensor(rng.standard_normal((c, s, s))),
    )
    params = attention.MkoiParams.create(rng, c) if method == "hpsa" else None
    times = []
    with no_grad():
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            if method == "hpsa":
                attention.hpsa(triple, params)
            else:
                attention.vanilla_sa(triple)
            times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def fit_loglog_slope(xs, ys):
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)),
                            np.log(np.asarray(ys, dtype=float)), 1)[0])


def scaling_bench(method, sizes, c=32, reps=5, seed=0, measure_wall=True):
    """Analytic flop counts (and optional wall times) over token counts.

    Returns (records, flop_slope, wall_slope); the flop slope is the
    least-squares slope of log(flops) against log(n).
    """
    if method not in ("hpsa", "vanilla_sa"):
        raise ValueError("method must be 'hpsa' or 'vanilla_sa'")
    if len(sizes) < 4 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("need at least 4 strictly increasing sizes")
    rng = np.random.default_rng(seed)
    flop_fn = hpsa_flops if method == "hpsa" else vanilla_sa_flops
    records = []
    for n in sizes:
        wall = _time_method(method, c, n, reps, rng) if measure_wall else 1
        records.append(BenchRecord(method=method, n=int(n), c=int(c),
                                   flops=int(flop_fn(n, c)), wall_ns=wall))
    flop_slope = fit_loglog_slope([r.n for r in records], [r.flops for r in records])
    wall_slope = (fit_loglog_slope([r.n for r in records], [r.wall_ns for r in records])
                  if measure_wall else float("nan"))
    return records, flop_slope, wall_slope


def write_bench_csv(records, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "n", "c", "flops", "wall_ns"])
        for r in records:
            writer.writerow([r.method, r.n, r.c, r.flops, r.wall_ns])
