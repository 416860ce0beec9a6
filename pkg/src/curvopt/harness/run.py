"""Training loop with windowed step timing, CSV emission, and eval probes.

Each run is a pure function of its config: datasets, parameter init, epoch
permutations, and method randomness all derive from fixed seeds. Wall-clock
step time is measured around the step call only; the timing summary uses
post-warmup windows.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ContractError
from ..method import Method, make
from ..models import Batch, Model, forward, init_params
from ..numeric import Rng
from ..telemetry import STEP_INFO_FIELDS
from .data import Dataset, gen_classification, gen_regression, load_idx

STEP_CSV_FIELDS = STEP_INFO_FIELDS + ("step_time_ms",)
EVAL_CSV_FIELDS = ("step", "wall_clock_s", "eval_loss", "eval_acc")


@dataclass(frozen=True)
class TimingConfig:
    warmup_steps: int = 2
    window: int = 100

    def __post_init__(self):
        if self.warmup_steps < 1 or self.window < 1:
            raise ContractError("warmup_steps and window must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    every_k: int = -1
    target_metric: float | None = None


@dataclass(frozen=True)
class RunConfig:
    dataset: dict
    model: dict
    method: dict
    steps: int
    batch_size: int
    seed: int = 0
    timing: TimingConfig = TimingConfig()
    eval: EvalConfig = EvalConfig()
    output: str | None = None
    # debug: dump the full preconditioner diagonal whenever an estimator
    # refreshes it (StepInfo itself only carries diag_mean)
    dump_diag: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        if "timing" in d and isinstance(d["timing"], dict):
            d["timing"] = TimingConfig(**d["timing"])
        if "eval" in d and isinstance(d["eval"], dict):
            d["eval"] = EvalConfig(**d["eval"])
        return RunConfig(**d)


@dataclass(frozen=True)
class TimingSummary:
    window_means_ms: tuple[float, ...]
    median_ms: float
    mean_ms: float
    std_ms: float
    p90_ms: float


@dataclass
class RunResult:
    step_rows: list[list]
    eval_rows: list[list]
    timing: TimingSummary
    time_to_target_s: float | None
    final_loss: float | None
    final_acc: float | None
    out_dir: Path | None = None


def timing_summary(step_times_ms: list[float], warmup_steps: int, window: int) -> TimingSummary:
    """Window means over post-warmup steps; run stats over the window means.

    All post-warmup steps are covered: the last window may be partial.
    """
    timed = np.asarray(step_times_ms[warmup_steps:], dtype=np.float64)
    if timed.size == 0:
        return TimingSummary((), float("nan"), float("nan"), float("nan"), float("nan"))
    means = [float(timed[lo : lo + window].mean()) for lo in range(0, timed.size, window)]
    return TimingSummary(
        tuple(means),
        float(np.median(means)),
        float(np.mean(means)),
        float(np.std(means)),
        float(np.percentile(means, 90)),
    )


def build_dataset(cfg: dict) -> tuple[Dataset, Dataset]:
    kind = cfg["kind"]
    params = dict(cfg.get("params", {}))
    if kind == "synth_regression":
        return gen_regression(
            n=int(params.get("n", 20000)),
            d=int(params.get("d", 128)),
            noise_std=float(params.get("noise_std", 0.1)),
            seed=int(params.get("seed", 0)),
        )
    if kind == "synth_classification":
        return gen_classification(
            n=int(params.get("n", 20000)),
            d=int(params.get("d", 32)),
            classes=int(params.get("classes", 10)),
            separation=float(params.get("separation", 10.0)),
            seed=int(params.get("seed", 0)),
        )
    if kind == "idx_files":
        train = load_idx(params["train_images"], params["train_labels"])
        test = load_idx(params["test_images"], params["test_labels"])
        return train, test
    raise ContractError(f"unknown dataset kind {kind!r}")


def build_model(cfg: dict) -> Model:
    return Model(
        input_dim=int(cfg["input_dim"]),
        hidden_widths=tuple(int(h) for h in cfg["hidden"]),
        output_dim=int(cfg["output_dim"]),
        activation=cfg.get("activation", "relu"),
    )


def build_method(cfg: dict, model: Model) -> Method:
    overrides = cfg.get("overrides", {})
    return make(cfg["preset"], model, **overrides)


def evaluate(model: Model, w, ds: Dataset, chunk: int = 4096) -> tuple[float, float | None]:
    """Mean loss and (for ce) accuracy over a full dataset, chunked."""
    total_loss = 0.0
    correct = 0
    n = ds.n
    for lo in range(0, n, chunk):
        X = ds.X[lo : lo + chunk]
        out = forward(model, w, X)
        if ds.loss_kind == "mse":
            resid = out - ds.y[lo : lo + chunk].reshape(out.shape)
            total_loss += 0.5 * float(np.sum(resid * resid))
        else:
            y = ds.y[lo : lo + chunk]
            shifted = out - out.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1))
            total_loss += float(np.sum(lse - shifted[np.arange(len(y)), y]))
            correct += int((out.argmax(axis=1) == y).sum())
    loss = total_loss / n
    acc = correct / n if ds.loss_kind == "ce" else None
    return loss, acc


class EpochBatcher:
    """Yields fixed-size batches from precomputed epoch permutations."""

    def __init__(self, ds: Dataset, batch_size: int, rng: Rng):
        if batch_size > ds.n:
            raise ContractError("batch_size exceeds dataset size")
        self.ds = ds
        self.batch_size = batch_size
        self.rng = rng
        self._perm = rng.permutation(ds.n)
        self._pos = 0

    def next(self) -> Batch:
        if self._pos + self.batch_size > self.ds.n:
            self._perm = self.rng.permutation(self.ds.n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return Batch(self.ds.X[idx], self.ds.y[idx], self.ds.loss_kind)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: tuple[str, ...], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_training(config: RunConfig, step_hook=None) -> RunResult:
    """Execute one training run per the config.

    step_hook, if given, is called inside the timed region with the step
    index (instrumentation for the warmup-exclusion tests).
    """
    train, test = build_dataset(config.dataset)
    model = build_model(config.model)
    method = build_method(config.method, model)

    root = Rng(config.seed)
    init_rng = root.split()
    batch_rng = root.split()
    w = init_params(model, init_rng)
    state = method.init(w, seed=config.seed)
    batcher = EpochBatcher(train, config.batch_size, batch_rng)

    step_rows: list[list] = []
    eval_rows: list[list] = []
    step_times: list[float] = []
    diag_dumps: dict[str, np.ndarray] = {}
    time_to_target = None
    run_start = time.perf_counter()

    def run_eval(at_step: int):
        nonlocal time_to_target
        loss, acc = evaluate(model, w, test)
        wall = time.perf_counter() - run_start
        eval_rows.append([at_step, wall, loss, float("nan") if acc is None else acc])
        target = config.eval.target_metric
        if target is not None and time_to_target is None:
            metric = acc if acc is not None else -loss
            if metric >= target:
                time_to_target = wall
        return loss, acc

    final_loss = final_acc = None
    # diverging runs overflow legitimately (reported via metrics, not warnings)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(config.steps):
            batch = batcher.next()
            t0 = time.perf_counter()
            if step_hook is not None:
                step_hook(t)
            w, state, info = method.step(w, batch, state)
            dt_ms = (time.perf_counter() - t0) * 1e3
            step_times.append(dt_ms)
            step_rows.append(info.to_row() + [dt_ms])
            if config.dump_diag and not np.isnan(info.diag_mean):
                diag_dumps[f"step_{t}"] = state.precond.diag.data.copy()
            if config.eval.every_k >= 1 and (t + 1) % config.eval.every_k == 0:
                final_loss, final_acc = run_eval(t + 1)
        if config.eval.every_k >= 1 and config.steps % config.eval.every_k != 0:
            final_loss, final_acc = run_eval(config.steps)
        elif config.eval.every_k < 1:
            final_loss, final_acc = evaluate(model, w, test)

    summary = timing_summary(step_times, config.timing.warmup_steps, config.timing.window)
    out_dir = None
    if config.output is not None:
        out_dir = Path(config.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "steps.csv", STEP_CSV_FIELDS, step_rows)
        _write_csv(out_dir / "eval.csv", EVAL_CSV_FIELDS, eval_rows)
        if diag_dumps:
            np.savez(out_dir / "diag_estimates.npz", **diag_dumps)
        meta = {
            "config": config.to_dict(),
            "config_hash": config_hash(config),
            "seed": config.seed,
            "build": f"curvopt-{__version__}",
        }
        (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return RunResult(
        step_rows=step_rows,
        eval_rows=eval_rows,
        timing=summary,
        time_to_target_s=time_to_target,
        final_loss=final_loss,
        final_acc=final_acc,
        out_dir=out_dir,
    )
