"""Command-line entry point.

Subcommands: train, bench-lanes, bench-cadence, bench-interactions, datagen.
A JSON config file supplies defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import bench_cadence, bench_interactions, bench_lanes
from .data import gen_classification, gen_regression, write_idx
from .run import RunConfig, run_training


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--sequential", action="store_true", help="disable sweep-point parallelism")


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if not cfg:
        print("train requires --config with a run configuration", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["output"] = args.out
    result = run_training(RunConfig.from_dict(cfg))
    print(f"steps: {len(result.step_rows)}")
    print(f"step_time_median_ms: {result.timing.median_ms:.4f}")
    if result.final_acc is not None:
        print(f"final_acc: {result.final_acc:.4f}")
    if result.final_loss is not None:
        print(f"final_loss: {result.final_loss:.6f}")
    if result.time_to_target_s is not None:
        print(f"time_to_target_s: {result.time_to_target_s:.3f}")
    if result.out_dir is not None:
        print(f"wrote {result.out_dir}")
    return 0


def _cmd_bench_lanes(args) -> int:
    cfg = _load_config(args.config)
    rows = bench_lanes(
        widths=args.widths or cfg.get("widths", [32, 64, 128, 256, 512, 1024, 2048, 4096]),
        batches=args.batches or cfg.get("batches", [32, 64, 128, 256, 512, 1024, 2048, 4096]),
        out_dir=args.out or cfg.get("out", "bench_out/lanes"),
        steps=args.steps or cfg.get("steps", 2000),
        seeds=args.seeds or cfg.get("seeds", 5),
        sequential=True if args.sequential else cfg.get("sequential", True),
    )
    print(f"bench-lanes: {len(rows)} points written")
    return 0


def _cmd_bench_cadence(args) -> int:
    cfg = _load_config(args.config)
    rows = bench_cadence(
        ks=args.ks or cfg.get("ks", [-1, 10, 5, 2, 1]),
        out_dir=args.out or cfg.get("out", "bench_out/cadence"),
        steps=args.steps or cfg.get("steps", 1000),
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
    )
    for k, median, p90, overhead in rows:
        print(f"rho_every_k={k:>3}  median={median:8.3f} ms  p90={p90:8.3f} ms  overhead={overhead:6.1f}%")
    return 0


def _cmd_bench_interactions(args) -> int:
    cfg = _load_config(args.config)
    rows = bench_interactions(
        out_dir=args.out or cfg.get("out", "bench_out/interactions"),
        dataset=cfg.get("dataset"),
        model=cfg.get("model"),
        steps=args.steps or cfg.get("steps", 500),
        target=cfg.get("target", 0.85),
        seeds=args.seeds or cfg.get("seeds", 5),
        sequential=args.sequential or cfg.get("sequential", False),
    )
    for row in rows:
        print(" | ".join(str(v) for v in row))
    return 0


def _cmd_datagen(args) -> int:
    out = Path(args.out or "data_out")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    if args.kind == "regression":
        train, test = gen_regression(args.n, args.d, args.noise_std, seed)
    else:
        train, test = gen_classification(args.n, args.d, args.classes, args.separation, seed)
    np.savez(
        out / f"{args.kind}.npz",
        X_train=train.X,
        y_train=train.y,
        X_test=test.X,
        y_test=test.y,
    )
    print(f"wrote {out / (args.kind + '.npz')}")
    if args.kind == "classification" and args.idx:
        side = int(np.ceil(np.sqrt(args.d)))
        padded = np.zeros((train.n, side * side))
        padded[:, : args.d] = train.X
        lo, hi = padded.min(), padded.max()
        scaled = ((padded - lo) / max(hi - lo, 1e-12) * 255).astype(np.uint8)
        write_idx(
            out / "train-images-idx3-ubyte",
            out / "train-labels-idx1-ubyte",
            scaled.reshape(train.n, side, side),
            train.y,
        )
        print(f"wrote IDX pair under {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="curvopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("bench-lanes", help="lane-scaling study")
    _add_common(p)
    p.add_argument("--widths", type=int, nargs="*", default=None)
    p.add_argument("--batches", type=int, nargs="*", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.set_defaults(func=_cmd_bench_lanes)

    p = sub.add_parser("bench-cadence", help="rho-probe cadence microbenchmark")
    _add_common(p)
    p.add_argument("--ks", type=int, nargs="*", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=_cmd_bench_cadence)

    p = sub.add_parser("bench-interactions", help="solver/damping/preconditioner grid")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.set_defaults(func=_cmd_bench_interactions)

    p = sub.add_parser("datagen", help="generate synthetic datasets")
    _add_common(p)
    p.add_argument("--kind", choices=["regression", "classification"], default="classification")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--idx", action="store_true", help="also write a u8 IDX pair")
    p.set_defaults(func=_cmd_datagen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
