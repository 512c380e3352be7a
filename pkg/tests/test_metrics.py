"""Disparity metrics, rank analysis, and the complexity benchmark."""

import numpy as np
import pytest

from halstereo.disparity import DisparityMap
from halstereo.metrics import (
    BenchRecord,
    fit_loglog_slope,
    hpsa_flops,
    rank_experiment,
    rank_ratio,
    scaling_bench,
    vanilla_sa_flops,
    write_bench_csv,
)
from halstereo.metrics import d1_rate, epe
from halstereo.tensor import Tensor


def _dmap(arr, valid=None):
    return DisparityMap(values=Tensor(np.asarray(arr, dtype=np.float64)),
                        valid=valid)


class TestEpe:
    def test_perfect_is_zero(self):
        gt = _dmap(np.arange(6.0).reshape(2, 3))
        assert epe(gt, gt) == 0.0

    def test_uniform_offset(self):
        gt = _dmap(np.arange(6.0).reshape(2, 3))
        pred = _dmap(np.arange(6.0).reshape(2, 3) + 1.0)
        assert epe(pred, gt) == 1.0

    def test_half_off_by_two(self):
        gt = _dmap(np.zeros((2, 2)))
        pred = _dmap([[2.0, 0.0], [2.0, 0.0]])
        assert epe(pred, gt) == 1.0

    def test_mask_intersection(self):
        gt = _dmap(np.zeros((2, 2)), valid=np.array([[True, True], [False, False]]))
        pred = _dmap([[1.0, 3.0], [99.0, 99.0]],
                     valid=np.array([[True, True], [True, True]]))
        assert epe(pred, gt) == 2.0

    def test_empty_mask(self):
        gt = _dmap(np.zeros((2, 2)), valid=np.zeros((2, 2), dtype=bool))
        with pytest.raises(ValueError):
            epe(gt, gt)


class TestD1Rate:
    def test_perfect_is_zero(self):
        gt = _dmap(np.full((3, 3), 10.0))
        assert d1_rate(gt, gt) == 0.0

    def test_both_thresholds_required(self):
        # error 4 px on gt 100: above 3 px but below 5 percent -> not bad
        gt = _dmap(np.full((1, 2), 100.0))
        pred = _dmap([[104.0, 100.0]])
        assert d1_rate(pred, gt) == 0.0
        # same error on gt 10: above both -> one of two pixels bad
        gt_small = _dmap(np.full((1, 2), 10.0))
        pred_small = _dmap([[14.0, 10.0]])
        assert d1_rate(pred_small, gt_small) == 50.0

    def test_pure_pixel_threshold(self):
        gt = _dmap(np.full((1, 4), 100.0))
        pred = _dmap([[104.0, 100.0, 100.0, 100.0]])
        assert d1_rate(pred, gt, px_thresh=3.0, rel_thresh=0.0) == 25.0


class TestRankRatio:
    def test_identity_full_rank(self):
        assert rank_ratio(np.eye(5)) == 1.0

    def test_rank_one(self):
        a = np.outer(np.arange(1.0, 5.0), np.arange(1.0, 7.0))
        assert rank_ratio(a) == pytest.approx(0.25)

    def test_zero_matrix(self):
        assert rank_ratio(np.zeros((4, 4))) == 0.0

    def test_requires_2d(self):
        with pytest.raises(ValueError):
            rank_ratio(np.zeros(4))


class TestRankExperiment:
    def test_dak_dominates_softmax(self):
        dak = rank_experiment("dak", 20, 16, 64, seed=0)
        sm = rank_experiment("softmax", 20, 16, 64, seed=0)
        assert dak.mean_rank_ratio >= sm.mean_rank_ratio
        assert dak.mean_rank_ratio <= 1.0

    def test_dak_full_rank_typical(self):
        rep = rank_experiment("dak", 20, 16, 64, seed=1)
        assert rep.full_rank_trials >= 19

    def test_adversarial_softmax_collapse(self):
        # one dominant logit shared by every row: post-softmax rows collapse
        # toward the same one-hot vector, so the rank ratio crashes
        a = np.zeros((16, 64))
        a[:, 3] = 60.0
        e = np.exp(a - a.max(axis=1, keepdims=True))
        sm = e / e.sum(axis=1, keepdims=True)
        assert rank_ratio(sm) <= 2 / 16

    def test_unknown_kernel(self):
        with pytest.raises(ValueError):
            rank_experiment("relu", 5, 8, 16, seed=0)

    def test_deterministic(self):
        a = rank_experiment("dak", 5, 8, 32, seed=7)
        b = rank_experiment("dak", 5, 8, 32, seed=7)
        assert a.to_dict() == b.to_dict()


class TestFlopModels:
    def test_hpsa_doubles_with_n(self):
        base = hpsa_flops(256, 32)
        assert hpsa_flops(512, 32) == 2 * base

    def test_vanilla_quadruples_with_n(self):
        base = vanilla_sa_flops(256, 32)
        assert vanilla_sa_flops(512, 32) == 4 * base

    def test_positive(self):
        assert hpsa_flops(64, 16) > 0
        assert vanilla_sa_flops(64, 16) > 0

    def test_loglog_slope_fit(self):
        xs = [1.0, 2.0, 4.0, 8.0]
        assert fit_loglog_slope(xs, [x ** 3 for x in xs]) == pytest.approx(3.0)


class TestScalingBench:
    def test_flop_slopes(self):
        _, s_lin, _ = scaling_bench("hpsa", [64, 256, 1024, 4096],
                                    measure_wall=False)
        _, s_quad, _ = scaling_bench("vanilla_sa", [64, 256, 1024, 4096],
                                     measure_wall=False)
        assert 0.9 <= s_lin <= 1.1
        assert 1.9 <= s_quad <= 2.1

    def test_record_fields(self):
        recs, _, _ = scaling_bench("hpsa", [16, 64, 256, 1024],
                                   measure_wall=False)
        assert [r.n for r in recs] == [16, 64, 256, 1024]
        assert all(r.method == "hpsa" and r.flops > 0 for r in recs)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            scaling_bench("hpsa", [64, 64, 256, 1024], measure_wall=False)
        with pytest.raises(ValueError):
            scaling_bench("conv", [64, 256, 1024, 4096], measure_wall=False)
        with pytest.raises(ValueError):
            scaling_bench("hpsa", [64, 256], measure_wall=False)

    def test_csv_schema(self, tmp_path):
        recs = [BenchRecord(method="hpsa", n=64, c=32, flops=10, wall_ns=5)]
        path = tmp_path / "bench.csv"
        write_bench_csv(recs, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "method,n,c,flops,wall_ns"
        assert lines[1] == "hpsa,64,32,10,5"
