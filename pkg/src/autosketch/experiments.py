"""Experiment runners behind the command line: FME trials, FL runs, sweeps.

Every runner returns the rows it would write; ``write_csv`` serializes them
with a fixed column order so that equal inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, grid_points
from .fedopt import DivergenceError, fedavg_run, load_task, make_linear_task, make_logistic_task
from .fedopt.tasks import Task
from .fme import norm_pool, run_fme, sparse_mean
from .metrics import compression_rate, mse
from .seeding import derive_seed, make_rng

FEDOPT_COLUMNS = (
    "run_id", "seed", "round", "protocol", "noise_multiplier", "c0", "C_j", "first_scalars",
    "second_scalars", "norm_or_error_estimate", "train_metric", "val_metric", "cum_compression_rate",
)
FME_COLUMNS = (
    "run_id", "seed", "protocol", "n", "d", "epsilon", "delta", "rounds_used", "halt_index", "halted",
    "norm_estimate", "first_scalars", "second_scalars", "compression_rate", "mse", "true_norm",
)
SUMMARY_COLUMNS = (
    "run_id", "seed", "estimator", "noise_multiplier", "c0", "compression", "rounds", "final_train_metric",
    "final_val_metric", "compression_rate", "diverged",
)
GENIE_COLUMNS = ("noise_multiplier", "baseline_metric", "threshold", "selected_rate", "delta")


class RunFailure(RuntimeError):
    """A run failed after some rows were produced; ``rows`` holds them."""

    def __init__(self, message: str, rows: list):
        super().__init__(message)
        self.rows = rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns, rows):
    """Write rows (dicts) with a fixed header; missing values become empty cells."""
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def run_seed(master_seed: int, seed: int) -> int:
    """Seed actually used by a run; the CSV records the listed ``seed``."""
    return derive_seed(master_seed, "run", seed)


def build_task(values: dict) -> Task:
    if "path" in values:
        return load_task(values["path"])
    args = {k: v for k, v in values.items() if k != "kind"}
    if values["kind"] == "logistic-regression":
        return make_logistic_task(**args)
    return make_linear_task(**args)


# -- fme ---------------------------------------------------------------------


def fme_pool(values: dict, rng: np.random.Generator) -> np.ndarray:
    """Synthetic clients: a spread pool with a given mean norm, or a k-sparse mean plus symmetric noise."""
    d, G, size = values["d"], values["G"], values["pool_size"]
    if values["pool"] == "norm":
        return norm_pool(size, d, G, values["mean_norm"], rng)
    mu = sparse_mean(d, values["sparsity"], values["mean_norm"], rng)
    spread = math.sqrt(max(G**2 - values["mean_norm"] ** 2, 0.0))
    half = rng.normal(size=(size // 2, d))
    half *= spread / np.maximum(np.linalg.norm(half, axis=1, keepdims=True), 1e-300)
    pool = mu + np.concatenate([half, -half])
    return pool * np.minimum(1.0, G / np.linalg.norm(pool, axis=1, keepdims=True))


def run_fme_experiment(cfg: ExperimentConfig) -> list[dict]:
    fme_cfg = cfg.fme_config()
    rows = []
    for seed in cfg.seeds:
        s = run_seed(cfg.master_seed, seed)
        pool = fme_pool(cfg.fme, make_rng(s, "pool"))
        truth = pool.mean(axis=0)
        out = run_fme(pool, fme_cfg, s)
        rows.append({
            "run_id": f"s{seed}",
            "seed": seed,
            "protocol": fme_cfg.protocol,
            "n": fme_cfg.n,
            "d": fme_cfg.d,
            "epsilon": fme_cfg.budget.epsilon,
            "delta": fme_cfg.budget.delta,
            "rounds_used": out.rounds_used,
            "halt_index": out.halt_index,
            "halted": out.halted,
            "norm_estimate": out.norm_estimate,
            "first_scalars": out.first_scalars,
            "second_scalars": out.second_scalars,
            "compression_rate": compression_rate(out.ledger()),
            "mse": mse(out.estimate, truth),
            "true_norm": float(np.linalg.norm(truth)),
        })
    return rows


# -- fedopt ------------------------------------------------------------------


def _round_rows(run_id: str, seed: int, fl_cfg, logs) -> list[dict]:
    return [{
        "run_id": run_id,
        "seed": seed,
        "round": log.round,
        "protocol": fl_cfg.estimator,
        "noise_multiplier": fl_cfg.noise_multiplier,
        "c0": fl_cfg.c0,
        "C_j": log.cols,
        "first_scalars": log.first_scalars,
        "second_scalars": log.second_scalars,
        "norm_or_error_estimate": log.statistic,
        "train_metric": log.train_metric,
        "val_metric": log.val_metric,
        "cum_compression_rate": log.cum_compression_rate,
    } for log in logs]


@dataclass
class RunSummary:
    run_id: str
    seed: int
    fl_cfg: object
    final_train_metric: float
    final_val_metric: float
    compression_rate: float
    diverged: bool

    def row(self) -> dict:
        c = self.fl_cfg
        return {
            "run_id": self.run_id, "seed": self.seed, "estimator": c.estimator,
            "noise_multiplier": c.noise_multiplier, "c0": c.c0, "compression": c.compression,
            "rounds": c.rounds, "final_train_metric": self.final_train_metric,
            "final_val_metric": self.final_val_metric, "compression_rate": self.compression_rate,
            "diverged": self.diverged,
        }


def _fl_run(task: Task, fl_cfg, run_id: str, seed: int, master: int, rows: list) -> RunSummary:
    """One FL run; appends its round rows to ``rows`` even when it diverges."""
    try:
        result = fedavg_run(task, fl_cfg, seed=run_seed(master, seed))
    except DivergenceError as exc:
        rows.extend(_round_rows(run_id, seed, fl_cfg, exc.logs))
        raise
    rows.extend(_round_rows(run_id, seed, fl_cfg, result.logs))
    last = result.logs[-1] if result.logs else None
    return RunSummary(
        run_id, seed, fl_cfg,
        last.train_metric if last else float("nan"),
        last.val_metric if last else float("nan"),
        result.compression_rate(task.d) if last else float("nan"),
        False,
    )


def run_fedopt_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Per-round rows of every seed, in seed order.

    Raises:
        RunFailure: on divergence, carrying every row produced so far.
    """
    task = build_task(cfg.task)
    fl_cfg = cfg.fl_config()
    rows: list[dict] = []
    for seed in cfg.seeds:
        try:
            _fl_run(task, fl_cfg, f"s{seed}", seed, cfg.master_seed, rows)
        except DivergenceError as exc:
            raise RunFailure(f"seed {seed}: {exc}", rows) from exc
    return rows


# -- sweep -------------------------------------------------------------------


def run_sweep(cfg: ExperimentConfig) -> tuple[list[dict], list[dict], list[dict]]:
    """Run every grid point for every seed.

    Diverged runs are recorded (``diverged`` true, final metrics of the last
    finite round) rather than aborting the sweep.

    Returns:
        (round rows, summary rows, genie rows); genie rows are empty unless
        ``cfg.genie`` is set.
    """
    task = build_task(cfg.task)
    rows: list[dict] = []
    summaries: list[RunSummary] = []
    for g, point in enumerate(grid_points(cfg.axes)):
        fl_cfg = cfg.fl_config(**point)
        for seed in cfg.seeds:
            run_id = f"g{g:03d}-s{seed}"
            try:
                summaries.append(_fl_run(task, fl_cfg, run_id, seed, cfg.master_seed, rows))
            except DivergenceError as exc:
                last = exc.logs[-1] if exc.logs else None
                summaries.append(RunSummary(
                    run_id, seed, fl_cfg,
                    last.train_metric if last else float("nan"),
                    last.val_metric if last else float("nan"),
                    last.cum_compression_rate if last else float("nan"),
                    True,
                ))
    genie = genie_table(summaries, cfg.delta, higher_is_better=task.metric_name == "accuracy") if cfg.genie else []
    return rows, [s.row() for s in summaries], genie


def genie_select(baseline: float, points, delta: float, higher_is_better: bool = True) -> float:
    """Largest compression rate whose interpolated metric stays within delta of the baseline.

    Metrics are interpolated linearly in log2(rate) between grid points; the
    baseline counts as the point at rate 1.

    Args:
        baseline: metric of the uncompressed run.
        points: (rate, metric) pairs of the fixed-rate grid.
        delta: allowed relative drop (``inf`` accepts every grid point).
        higher_is_better: False for losses such as MSE.

    Returns:
        The selected rate (1.0 when no compressed point qualifies).
    """
    pts = sorted([(1.0, baseline)] + [(float(r), float(m)) for r, m in points])
    if math.isinf(delta):
        return max(r for r, _ in pts)
    sign = 1.0 if higher_is_better else -1.0
    threshold = baseline - sign * delta * abs(baseline)
    # margin >= 0 means acceptable
    xs = [math.log2(r) for r, _ in pts]
    margins = [sign * (m - threshold) for _, m in pts]
    best = 0.0
    for i, (x, m) in enumerate(zip(xs, margins)):
        if m >= 0:
            best = max(best, x)
        if i + 1 < len(xs):
            x2, m2 = xs[i + 1], margins[i + 1]
            if m >= 0 > m2:
                best = max(best, x + (x2 - x) * m / (m - m2))
    return 2.0**best


def genie_table(summaries: list[RunSummary], delta: float, higher_is_better: bool = True) -> list[dict]:
    """Genie selection per noise multiplier, on seed-averaged final metrics.

    Raises:
        ValueError: when a noise multiplier has no uncompressed baseline run.
    """
    groups: dict[float, dict] = {}
    for s in summaries:
        c = s.fl_cfg
        group = groups.setdefault(c.noise_multiplier, {"baseline": [], "grid": {}})
        if c.estimator == "dp":
            group["baseline"].append(s.final_val_metric)
        elif c.estimator == "fixed-sketch":
            group["grid"].setdefault(c.compression, []).append((s.compression_rate, s.final_val_metric))
    out = []
    for z in sorted(groups):
        group = groups[z]
        if not group["baseline"]:
            raise ValueError(f"no uncompressed baseline for noise_multiplier={z}")
        base = float(np.mean(group["baseline"]))
        points = [(float(np.mean([r for r, _ in v])), float(np.mean([m for _, m in v])))
                  for _, v in sorted(group["grid"].items())]
        sign = 1.0 if higher_is_better else -1.0
        threshold = base - sign * delta * abs(base) if math.isfinite(delta) else -sign * math.inf
        out.append({
            "noise_multiplier": z,
            "baseline_metric": base,
            "threshold": threshold,
            "selected_rate": genie_select(base, points, delta, higher_is_better),
            "delta": delta,
        })
    return out
