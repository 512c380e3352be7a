"""Command-line front end: data generation, toy training, evaluation and
the numerical verification suites.

Exit codes: 0 success, 1 usage/validation failure, 2 numerical-check
failure. The HAL_OUT_DIR environment variable overrides any --out path.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, pipeline, verify
from .config import Config


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _out_dir(path):
    out = Path(os.environ.get("HAL_OUT_DIR", path))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args):
    if getattr(args, "config", None):
        return Config.from_json(args.config)
    return Config()


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = _out_dir(args.out)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        sample = data.gen_rds(cfg.toy_h, cfg.toy_w, cfg.toy_max_disp,
                              args.seed * 100003 + i)
        if args.illposed and i % 2 == 0:
            h, w = cfg.toy_h, cfg.toy_w
            rect = (int(rng.integers(0, h // 2)), int(rng.integers(0, w // 2)),
                    h // 4, w // 4)
            kind = "textureless" if i % 4 == 0 else "specular"
            sample = data.apply_illposed_patch(sample, kind, rect)
        data.save_sample(sample, out / f"sample_{i:04d}")
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_train_toy(args):
    cfg = _load_config(args)
    out = _out_dir(args.out)
    params, history = pipeline.train_toy(cfg, seed=args.seed, kernel=args.kernel,
                                         steps=args.steps, log=print)
    pipeline.save_model(params, cfg, out / "model.npz")
    (out / "history.json").write_text(json.dumps(
        {"kernel": args.kernel, "seed": args.seed if args.seed is not None else cfg.seed,
         "val_epe": history}))
    final = history[max(history)]
    print(f"final validation EPE: {final:.4f}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    out = _out_dir(args.out)
    params, model_cfg = pipeline.load_model(args.model)
    samples = [data.load_sample(p) for p in sorted(Path(args.data).iterdir())
               if p.is_dir()]
    if not samples:
        print("no samples found", file=sys.stderr)
        return 1
    iters = args.iters if args.iters else model_cfg.toy_train_iters
    epes, d1s = [], []
    from .tensor import no_grad
    with no_grad():
        for s in samples:
            res = pipeline.forward(params, s, iters)
            epes.append(metrics.epe(res.full_preds[-1], s.gt_disp))
            d1s.append(metrics.d1_rate(res.full_preds[-1], s.gt_disp))
    report = {"samples": len(samples), "iters": iters,
              "epe": float(np.mean(epes)), "d1_percent": float(np.mean(d1s))}
    (out / "metrics.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def cmd_bench(args):
    out = _out_dir(os.path.dirname(args.out) or ".")
    sizes = [int(s) for s in args.sizes.split(",")]
    all_records = []
    slopes = {}
    for method in ("hpsa", "vanilla_sa"):
        records, flop_slope, wall_slope = metrics.scaling_bench(
            method, sizes, c=args.c, reps=args.reps, seed=args.seed)
        all_records += records
        slopes[method] = flop_slope
        print(f"{method}: flop slope {flop_slope:.4f}, wall slope {wall_slope:.4f}")
    metrics.write_bench_csv(all_records, out / os.path.basename(args.out))
    print(f"wrote {out / os.path.basename(args.out)}")
    if not (0.9 <= slopes["hpsa"] <= 1.1 and 1.9 <= slopes["vanilla_sa"] <= 2.1):
        print("flop scaling outside expected bands", file=sys.stderr)
        return 2
    return 0


def cmd_gradcheck(args):
    reports = verify.gradient_suite(tolerance=args.tolerance, seed=args.seed)
    ok = True
    for rep in reports:
        print(rep)
        ok &= rep.passed
    return 0 if ok else 2


def cmd_rank(args):
    out = _out_dir(args.out)
    reps = {k: metrics.rank_experiment(k, args.trials, args.c, args.n, args.seed)
            for k in ("dak", "softmax")}
    payload = {k: r.to_dict() for k, r in reps.items()}
    (out / "rank.json").write_text(json.dumps(payload, indent=2))
    for k, r in reps.items():
        print(f"{k}: mean rank ratio {r.mean_rank_ratio:.4f} "
              f"({r.full_rank_trials}/{r.trials} full rank)")
    if reps["dak"].mean_rank_ratio < reps["softmax"].mean_rank_ratio:
        print("dense kernel rank fell below softmax", file=sys.stderr)
        return 2
    return 0


def cmd_equiv(args):
    raw, through = verify.equivalence_suite(trials=args.trials, seed=args.seed)
    print(f"max deviation raw: {raw:.3e}, through mkoi: {through:.3e}")
    if raw > 1e-12 or through > 1e-12:
        print("decoupling identity violated beyond 1e-12", file=sys.stderr)
        return 2
    return 0


def build_parser():
    parser = _Parser(prog="halstereo")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic stereo samples")
    p.add_argument("--out", default="out/data")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=666)
    p.add_argument("--illposed", action="store_true")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-toy", help="short end-to-end training run")
    p.add_argument("--out", default="out/train")
    p.add_argument("--kernel", choices=["dak", "softmax"], default="dak")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a sample dir")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", default="out/eval")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="linear vs quadratic scaling benchmark")
    p.add_argument("--sizes", default="64,256,1024,4096")
    p.add_argument("--c", type=int, default=32)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=666)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=666)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("rank", help="attention-map rank comparison")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--c", type=int, default=16)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=666)
    p.add_argument("--out", default="out/rank")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("equiv", help="kernel decoupling identity check")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=666)
    p.set_defaults(fn=cmd_equiv)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
