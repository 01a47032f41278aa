"""Federated averaging with a pluggable private mean estimator."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..metrics import CommLedger, compression_rate
from ..seeding import make_rng
from ..sketching import clip
from .estimators import FlConfig, MeanEstimator, make_estimator
from .tasks import Task


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or model; carries the partial run."""

    def __init__(self, message: str, logs: list, model: np.ndarray):
        super().__init__(message)
        self.logs = logs
        self.model = model


@dataclass(frozen=True)
class RoundLog:
    """One executed round.

    Attributes:
        round: 1-based round index.
        cols: first-sketch width C_j (0 when uncompressed).
        first_scalars: main-message scalars per client.
        second_scalars: auxiliary-sketch scalars per client.
        statistic: noisy norm or error estimate, if any.
        train_metric: training loss after the update.
        val_metric: validation metric after the update.
        update_norm: norm of the exact mean of the clipped updates.
        estimate_norm: norm of the private estimate that was applied.
        sketch_noise_std: noise std per entry of the averaged message.
        stat_noise_std: noise std of the statistic.
        cum_compression_rate: harmonic compression rate up to this round.
    """

    round: int
    cols: int
    first_scalars: int
    second_scalars: int
    statistic: float | None
    train_metric: float
    val_metric: float
    update_norm: float
    estimate_norm: float
    sketch_noise_std: float
    stat_noise_std: float
    cum_compression_rate: float


@dataclass
class FlResult:
    logs: list[RoundLog]
    model: np.ndarray

    def ledger(self, d: int) -> CommLedger:
        return CommLedger(d, [r.first_scalars for r in self.logs], [r.second_scalars for r in self.logs])

    def compression_rate(self, d: int) -> float:
        return compression_rate(self.ledger(d))

    @property
    def final_val_metric(self) -> float:
        return self.logs[-1].val_metric if self.logs else float("nan")


def local_update(task: Task, w: np.ndarray, client: int, cfg: FlConfig, rng: np.random.Generator) -> np.ndarray:
    """Run client SGD from w and return the model delta."""
    X, y = task.features[client], task.labels[client]
    m = X.shape[0]
    local = w.copy()
    for _ in range(cfg.local_steps):
        if 0 < cfg.batch_size < m:
            idx = np.sort(rng.choice(m, size=cfg.batch_size, replace=False))
            local -= cfg.client_lr * task.grad(local, X[idx], y[idx])
        else:
            local -= cfg.client_lr * task.grad(local, X, y)
    return local - w


def client_updates(task: Task, w: np.ndarray, cohort: np.ndarray, cfg: FlConfig, seed: int, j: int) -> np.ndarray:
    """Clipped updates of one cohort; each client draws from its own (round, client) stream."""
    out = np.empty((cohort.shape[0], task.d))
    for i, c in enumerate(cohort):
        z = local_update(task, w, int(c), cfg, make_rng(seed, j, "client", int(c)))
        if cfg.l1_zero_threshold is not None and np.sum(np.abs(z)) > cfg.l1_zero_threshold:
            z = np.zeros_like(z)
        out[i] = clip(z, cfg.clip)
    return out


def sample_cohort(num_clients: int, n: int, seed: int, j: int) -> np.ndarray:
    if n > num_clients:
        raise ValueError(f"cannot sample {n} clients from {num_clients}")
    return np.sort(make_rng(seed, j, "cohort").choice(num_clients, size=n, replace=False))


def fedavg_run(task: Task, cfg: FlConfig, estimator: MeanEstimator | None = None, seed: int = 0,
               initial_model: np.ndarray | None = None) -> FlResult:
    """Federated averaging with server momentum and a private mean estimator.

    Each round samples a cohort, runs local SGD, clips the updates to
    ``cfg.clip``, estimates their mean with ``estimator`` and applies it with
    heavy-ball momentum on the server.

    Raises:
        DivergenceError: on a non-finite model or loss; carries the rounds
            completed so far.
    """
    d = task.d
    if estimator is None:
        estimator = make_estimator(cfg, d)
    estimator.reset()
    w = np.zeros(d) if initial_model is None else np.array(initial_model, dtype=np.float64)
    if w.shape != (d,):
        raise ValueError(f"initial model must have shape ({d},)")
    velocity = np.zeros(d)
    logs: list[RoundLog] = []
    sent = 0

    for j in range(1, cfg.rounds + 1):
        cohort = sample_cohort(task.num_clients, cfg.clients_per_round, seed, j)
        updates = client_updates(task, w, cohort, cfg, seed, j)
        est = estimator.estimate(updates, j, seed)
        velocity = cfg.server_momentum * velocity + est.mean
        w = w + cfg.server_lr * velocity

        # overflow is reported below as divergence, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            train = task.train_loss(w)
            val = task.val_metric(w)
        if not (np.isfinite(train) and np.isfinite(val) and np.all(np.isfinite(w))):
            raise DivergenceError(f"non-finite training loss at round {j}", logs, w)
        sent += est.first_scalars + est.second_scalars
        logs.append(RoundLog(
            round=j,
            cols=est.cols,
            first_scalars=est.first_scalars,
            second_scalars=est.second_scalars,
            statistic=est.statistic,
            train_metric=train,
            val_metric=val,
            update_norm=float(np.linalg.norm(updates.mean(axis=0))),
            estimate_norm=float(np.linalg.norm(est.mean)),
            sketch_noise_std=est.sketch_noise_std,
            stat_noise_std=est.stat_noise_std,
            cum_compression_rate=d * j / sent,
        ))
    return FlResult(logs, w)


def two_stage_fl(task: Task, cfg: FlConfig, seed: int = 0) -> FlResult:
    """Federated averaging with the two-stage estimator."""
    return fedavg_run(task, replace(cfg, estimator="two-stage"), seed=seed)
