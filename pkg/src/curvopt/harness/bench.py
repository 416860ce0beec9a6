"""The three benchmark studies: lane scaling, probe-cadence overhead, and
module interactions.

Each study writes one summary CSV with a stable column set plus a meta.json.
Sweep points can run across worker threads; the timing studies measure
sequentially (the cadence study pairs its settings step by step).
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..models import init_params
from ..numeric import Rng
from .run import (
    EpochBatcher,
    EvalConfig,
    RunConfig,
    RunResult,
    TimingConfig,
    _write_csv,
    build_dataset,
    build_method,
    build_model,
    run_training,
    timing_summary,
)


def _write_meta(out_dir: Path, study: str, params: dict) -> None:
    meta = {"study": study, "params": params, "build": f"curvopt-{__version__}"}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))

LANES_CSV_FIELDS = ("lane", "width", "batch", "step_time_median_ms", "n_seeds")
CADENCE_CSV_FIELDS = ("rho_every_k", "median_ms", "p90_ms", "overhead_pct")
INTERACTIONS_CSV_FIELDS = (
    "solver",
    "precond",
    "damping",
    "budget",
    "lr_selected",
    "time_to_target_s",
    "final_acc",
)

CG_BUDGET_LIGHT = {"tol": 1e-3, "maxiter": 3, "stabilise_every": 10, "warm_start": True}
CG_BUDGET_HEAVY = {"tol": 1e-5, "maxiter": 10, "stabilise_every": 5, "warm_start": True}

MISSING = "--"


def _run_many(jobs, sequential: bool):
    if sequential:
        return [job() for job in jobs]
    with ThreadPoolExecutor() as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


# -- lane scaling -------------------------------------------------------------


def _lane_run_config(preset, width, batch, steps, seed, dataset_n, input_dim, timing):
    return RunConfig(
        dataset={
            "kind": "synth_regression",
            "params": {"n": dataset_n, "d": input_dim, "noise_std": 0.1, "seed": 0},
        },
        model={"input_dim": input_dim, "hidden": [width, width], "output_dim": 1, "activation": "relu"},
        method={"preset": preset, "overrides": {}},
        steps=steps,
        batch_size=batch,
        seed=seed,
        timing=timing,
    )


def bench_lanes(
    widths,
    batches,
    out_dir,
    steps: int = 2000,
    seeds: int = 5,
    fixed_width: int = 128,
    fixed_batch: int = 128,
    input_dim: int = 128,
    dataset_n: int = 20000,
    window: int = 100,
    sequential: bool = True,
) -> list[list]:
    """Step-time medians for the param-lane and row-lane GGN presets.

    One sweep grows hidden width at fixed batch size, the other grows batch
    size at fixed width. Each point runs both presets over `seeds` seeds; the
    reported value is the median of the per-seed median step times.
    """
    presets = (("param", "sgn_mse"), ("row", "egn_mse_cg"))
    points = []
    for w in widths:
        points.append((int(w), fixed_batch))
    for b in batches:
        if (fixed_width, int(b)) not in points:
            points.append((fixed_width, int(b)))
    timing = TimingConfig(warmup_steps=2, window=window)
    rows = []
    for width, batch in points:
        for lane, preset in presets:
            def one_seed(seed, preset=preset, width=width, batch=batch):
                cfg = _lane_run_config(preset, width, batch, steps, seed, dataset_n, input_dim, timing)
                return run_training(cfg).timing.median_ms

            try:
                medians = _run_many([lambda s=s: one_seed(s) for s in range(seeds)], sequential)
            except MemoryError:
                print(f"bench-lanes: OOM at lane={lane} width={width} batch={batch}; skipped", file=sys.stderr)
                continue
            rows.append([lane, width, batch, float(np.median(medians)), seeds])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "lanes.csv", LANES_CSV_FIELDS, rows)
    _write_meta(out_dir, "lanes", {"widths": list(widths), "batches": list(batches), "steps": steps, "seeds": seeds})
    return rows


# -- cadence overhead ---------------------------------------------------------


def bench_cadence(
    ks,
    out_dir,
    steps: int = 1000,
    width: int = 1024,
    input_dim: int = 512,
    batch: int = 256,
    cg_maxiter: int = 3,
    cg_warm_start: bool = True,
    window: int = 50,
    warmup: int = 2,
    seed: int = 0,
) -> list[list]:
    """Steady-state step time of newton_cg as the rho-probe cadence varies.

    Constant damping and a fixed solver budget; only rho_every_k changes.
    Overhead is reported relative to the probes-disabled setting (k = -1).

    Measurement is paired: the gated rho probe never feeds back into the
    method state under constant damping, so all settings share one parameter
    trajectory. Each step is therefore executed once per setting from the
    same buffers (in rotating order) and timed; machine drift and buffer
    placement effects hit every cadence identically.
    """
    ks = list(ks)
    train, _ = build_dataset(
        {"kind": "synth_regression", "params": {"n": 20000, "d": input_dim, "noise_std": 0.1, "seed": 0}}
    )
    model = build_model(
        {"input_dim": input_dim, "hidden": [width, width], "output_dim": 1, "activation": "relu"}
    )
    methods = {
        k: build_method(
            {
                "preset": "newton_cg",
                "overrides": {
                    "damping": {"policy": "constant", "lam0": 1.0, "tr": None},
                    "solver": {"cg": {"maxiter": cg_maxiter, "warm_start": cg_warm_start}},
                    "telemetry": {"rho_every_k": k},
                },
            },
            model,
        )
        for k in ks
    }
    root = Rng(seed)
    w = init_params(model, root.split())
    batcher = EpochBatcher(train, batch, root.split())
    state = methods[ks[0]].init(w, seed=seed)
    times = {k: [] for k in ks}

    for t in range(steps + warmup):
        b = batcher.next()
        shift = t % len(ks)
        order = ks[shift:] + ks[:shift]
        for k in order:
            t0 = time.perf_counter()
            w_next, state_next, _ = methods[k].step(w, b, state)
            times[k].append((time.perf_counter() - t0) * 1e3)
        w, state = w_next, state_next

    summaries = {k: timing_summary(times[k], warmup, window) for k in ks}
    base = summaries[-1].median_ms if -1 in summaries else None
    rows = []
    for k in ks:
        median = summaries[k].median_ms
        overhead = float("nan") if base is None else (median / base - 1.0) * 100.0
        rows.append([k, median, summaries[k].p90_ms, overhead])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "cadence.csv", CADENCE_CSV_FIELDS, rows)
    _write_meta(out_dir, "cadence", {"ks": ks, "steps": steps, "width": width, "batch": batch, "cg_maxiter": cg_maxiter, "seed": seed})
    return rows


# -- module interactions ------------------------------------------------------

TR_OVERRIDES = {"policy": "trust_region", "lam0": 1.0, "tr": {"every_k": 5}}
CONST_OVERRIDES = {"policy": "constant", "lam0": 1.0, "tr": None}


def interaction_grid() -> list[dict]:
    """The 8 SGN cells (3 one-toggle axes) plus the two first-order baselines."""
    rows = [
        {"solver": "sgd", "precond": MISSING, "damping": MISSING, "budget": MISSING},
        {"solver": "adam", "precond": MISSING, "damping": MISSING, "budget": MISSING},
    ]
    for damping in ("const", "trust_region"):
        for budget in ("light", "heavy"):
            for precond in ("none", "sq_grad"):
                rows.append(
                    {"solver": "sgn", "precond": precond, "damping": damping, "budget": budget}
                )
    return rows


def _interaction_overrides(cell: dict, lr: float) -> tuple[str, dict]:
    if cell["solver"] == "sgd":
        chain = [
            {"kind": "scale_by_schedule", "params": {"schedule": "constant", "alpha0": lr}},
            {"kind": "scale", "params": {"value": -1.0}},
        ]
        return "sgd", {"chain": chain}
    if cell["solver"] == "adam":
        chain = [
            {"kind": "scale_by_adam", "params": {}},
            {"kind": "scale_by_schedule", "params": {"schedule": "constant", "alpha0": lr}},
            {"kind": "scale", "params": {"value": -1.0}},
        ]
        return "adam", {"chain": chain}
    budget = CG_BUDGET_LIGHT if cell["budget"] == "light" else CG_BUDGET_HEAVY
    overrides: dict = {
        "solver": {"cg": dict(budget)},
        "damping": dict(TR_OVERRIDES if cell["damping"] == "trust_region" else CONST_OVERRIDES),
        "chain": [
            {"kind": "scale", "params": {"value": lr}},
            {"kind": "scale", "params": {"value": -1.0}},
        ],
    }
    if cell["precond"] == "sq_grad":
        overrides["precond"] = {"kind": "sq_grad"}
    return "sgn_ce", overrides


def bench_interactions(
    out_dir,
    dataset: dict | None = None,
    model: dict | None = None,
    steps: int = 500,
    batch_size: int = 128,
    target: float = 0.85,
    eval_every: int = 50,
    lr_grid=(1e-4, 1e-3, 1e-2, 1e-1, 1.0),
    seeds: int = 5,
    search_seed: int = 0,
    sequential: bool = False,
) -> list[list]:
    """Time-to-target and final accuracy over the solver/damping/precond grid.

    Per cell: a learning-rate search on `search_seed` picks the lr with the
    best final accuracy, then the cell is re-run over `seeds` seeds at that
    lr. Cells that never reach the target report the missing marker.
    """
    dataset = dataset or {
        "kind": "synth_classification",
        "params": {"n": 20000, "d": 32, "classes": 10, "separation": 10.0, "seed": 0},
    }
    model = model or {"input_dim": 32, "hidden": [64], "output_dim": 10, "activation": "relu"}

    def run_cell(cell, lr, seed) -> RunResult:
        preset, overrides = _interaction_overrides(cell, lr)
        cfg = RunConfig(
            dataset=dataset,
            model=model,
            method={"preset": preset, "overrides": overrides},
            steps=steps,
            batch_size=batch_size,
            seed=seed,
            eval=EvalConfig(every_k=eval_every, target_metric=target),
        )
        return run_training(cfg)

    rows = []
    for cell in interaction_grid():
        search = _run_many(
            [lambda lr=lr: run_cell(cell, lr, search_seed) for lr in lr_grid], sequential
        )
        best_idx = int(np.argmax([r.final_acc for r in search]))
        lr_sel = lr_grid[best_idx]
        finals = _run_many(
            [lambda s=s: run_cell(cell, lr_sel, s) for s in range(seeds)], sequential
        )
        times = [r.time_to_target_s for r in finals]
        reached = [t for t in times if t is not None]
        ttt = float(np.mean(reached)) if reached else MISSING
        acc = float(np.mean([r.final_acc for r in finals]))
        rows.append(
            [cell["solver"], cell["precond"], cell["damping"], cell["budget"], lr_sel, ttt, acc]
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "interactions.csv", INTERACTIONS_CSV_FIELDS, rows)
    _write_meta(out_dir, "interactions", {"steps": steps, "target": target, "lr_grid": list(lr_grid), "seeds": seeds})
    return rows
