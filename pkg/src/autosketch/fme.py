"""Private federated mean estimation with adaptively sized sketches.

Three protocols are provided:

* ``adapt_norm_fme``: two rounds. Round one privately estimates the norm of
  the mean from a tiny second sketch; round two sizes the main sketch so that
  compression error matches the privacy error for that norm.
* ``adapt_tail_fme``: up to floor(log d) rounds of count-median-of-means
  sketches of doubling width. Each round re-sketches its own estimate to
  measure the error and stops through AboveThreshold once the error is small.
* ``adapt_tail_topk_fme``: the same loop with Top-k truncation (k doubling in
  lockstep with the width) and a round-dependent threshold.

Clients are given as a pool (an (N, d) array); each round draws a fresh,
disjoint cohort of n clients from a seeded permutation of the pool.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .metrics import CommLedger
from .privacy import (
    NoiseConfig,
    PrivacyBudget,
    above_threshold_init,
    above_threshold_query,
    assert_sensitivity,
    calibrate,
    gaussian_vector,
    laplace_scalar,
)
from .secagg import MODES, FieldConfig, secagg_sum
from .seeding import derive_seed, make_rng
from .sketching import (
    SketchedVector,
    SketchOperator,
    SketchParams,
    clip_rows,
    sketch,
    top_k,
    unsketch_median,
)

PROTOCOLS = ("adapt-norm", "adapt-tail-unbiased", "adapt-tail-topk")


@dataclass(frozen=True)
class FmeConfig:
    """Protocol parameters.

    Attributes:
        n: cohort size per round.
        d: dimension.
        G: bound on client vector norms.
        budget: (epsilon, delta); epsilon may be ``inf`` to switch noise off.
        beta: failure probability used in the size and threshold formulas.
        protocol: one of ``PROTOCOLS``.
        gamma_sparse: tail-norm promise for the Top-k variant.
        pad_const: multiplier inside the ceiling that sets P.
        second_pad_const: multiplier inside the ceiling that sets the second-sketch P.
        slack_scale: multiplier on the additive slack (norm padding or halting
            threshold). 1.0 gives the worst-case constants.
        secagg_mode: "ideal" or "masked".
        field: ring settings for masked mode.
        debug: check every clipped message against the clip bound.
    """

    n: int
    d: int
    G: float
    budget: PrivacyBudget
    beta: float
    protocol: str = "adapt-norm"
    gamma_sparse: float | None = None
    pad_const: float = 1.0
    second_pad_const: float = 1.0
    slack_scale: float = 1.0
    secagg_mode: str = "ideal"
    field: FieldConfig = FieldConfig()
    debug: bool = False

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"cohort size n must be a positive integer, got {self.n!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension d must be a positive integer, got {self.d!r}")
        if not self.G > 0:
            raise ValueError(f"G must be positive, got {self.G!r}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta!r}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.protocol == "adapt-tail-topk" and (self.gamma_sparse is None or self.gamma_sparse < 0):
            raise ValueError("adapt-tail-topk needs a nonnegative gamma_sparse")
        if self.protocol != "adapt-norm" and self.d < 2:
            raise ValueError("adapt-tail protocols need d >= 2")
        if not self.pad_const > 0 or not self.second_pad_const > 0:
            raise ValueError("sketch constants must be positive")
        if not self.slack_scale >= 0:
            raise ValueError("slack_scale must be nonnegative")
        if self.secagg_mode not in MODES:
            raise ValueError(f"unknown secagg mode {self.secagg_mode!r}")
        if self.protocol == "adapt-norm" and math.isfinite(self.budget.epsilon):
            limit = min(self.budget.log_inv_delta / (self.n * self.budget.epsilon) ** 2, 1.0)
            if not self.beta < limit:
                warnings.warn(
                    f"beta={self.beta} is not below {limit:.4g}; the two-round error guarantee does not apply",
                    stacklevel=3,
                )

    @property
    def B(self) -> float:
        """Clipping bound on sketch rows, twice the data bound."""
        return 2.0 * self.G


@dataclass(frozen=True)
class FmeOutcome:
    """Result of one protocol run.

    Attributes:
        estimate: the mean estimate.
        scalars_per_round: (first-sketch, second-sketch) scalars each client sent.
        rounds_used: number of executed rounds.
        halt_index: round at which AboveThreshold halted, if it did.
        norm_estimate: private norm estimate (adapt-norm only).
        halted: False when an adaptive-tail run exhausted its rounds.
        cols: first-sketch width C_j used in each round (0 when unused).
        error_estimates: re-sketched error before noise, per round.
    """

    estimate: np.ndarray
    scalars_per_round: tuple[tuple[int, int], ...]
    rounds_used: int
    halt_index: int | None = None
    norm_estimate: float | None = None
    halted: bool = True
    cols: tuple[int, ...] = ()
    error_estimates: tuple[float, ...] = ()

    def bits_per_round(self, bits_per_scalar: int = 32) -> list[tuple[int, int]]:
        return [(a * bits_per_scalar, b * bits_per_scalar) for a, b in self.scalars_per_round]

    def ledger(self, bits_per_scalar: int = 32) -> CommLedger:
        return CommLedger(
            d=self.estimate.shape[0],
            first=[a for a, _ in self.scalars_per_round],
            second=[b for _, b in self.scalars_per_round],
            bits_per_scalar=bits_per_scalar,
        )

    @property
    def first_scalars(self) -> int:
        return sum(a for a, _ in self.scalars_per_round)

    @property
    def second_scalars(self) -> int:
        return sum(b for _, b in self.scalars_per_round)


@dataclass(frozen=True)
class NormPlan:
    pads: int
    second_pads: int
    second_cols: int
    gamma_bar: float
    noise: NoiseConfig


@dataclass(frozen=True)
class TailPlan:
    max_rounds: int
    rows: int
    pads: int
    first_cols: int
    second_pads: int
    second_cols: int
    threshold: float
    threshold_per_sqrt_k: float
    alpha_tilde: float
    noise: NoiseConfig


def plan_adapt_norm(cfg: FmeConfig) -> NormPlan:
    """Sketch sizes, slack and noise for the two-round norm-adaptive protocol."""
    B, n, eps, beta = cfg.B, cfg.n, cfg.budget.epsilon, cfg.beta
    pads = math.ceil(cfg.pad_const * math.log(4.0 / beta))
    second_pads = math.ceil(cfg.second_pad_const * math.log(4.0 / beta))
    gamma_bar = 2.0 * B * math.log(8.0 / beta) / (n * eps) + B * math.sqrt(math.log(16.0 / beta)) / math.sqrt(n)
    noise = calibrate(cfg.budget, B, n, "adapt-norm-fme")
    return NormPlan(pads, second_pads, 2, cfg.slack_scale * gamma_bar, noise)


def plan_adapt_tail(cfg: FmeConfig) -> TailPlan:
    """Sketch sizes, threshold and noise for the adaptive-tail protocols."""
    B, n, d, eps, beta, G = cfg.B, cfg.n, cfg.d, cfg.budget.epsilon, cfg.beta, cfg.G
    log_d = math.log(d)
    max_rounds = max(1, math.floor(log_d))
    rows = math.ceil(2.0 * math.log(8.0 * d * log_d / beta))
    pads = math.ceil(cfg.pad_const * 2.0 * math.log(8.0 * rows * log_d / beta))
    second_pads = math.ceil(cfg.second_pad_const * 2.0 * math.log(4.0 * d * log_d / beta))
    noise = calibrate(cfg.budget, B, n, "adapt-tail-fme", d=d, rows=rows)
    sigma = noise.sigma
    alpha_tilde = 32.0 * B * (math.log(max_rounds) + math.log(8.0 / beta)) / (n * eps)
    stat = G * math.sqrt(math.log(8.0 * log_d / beta)) / math.sqrt(n)
    if cfg.protocol == "adapt-tail-topk":
        fixed = 16.0 * (cfg.gamma_sparse * G + stat) + alpha_tilde
        per_sqrt_k = 16.0 * sigma / n
    else:
        fixed = 15.0 * max(stat, math.sqrt(d) * sigma / n) + alpha_tilde
        per_sqrt_k = 0.0
    return TailPlan(
        max_rounds=max_rounds,
        rows=rows,
        pads=pads,
        first_cols=8 * pads,
        second_pads=second_pads,
        second_cols=2 * second_pads,
        threshold=cfg.slack_scale * fixed,
        threshold_per_sqrt_k=cfg.slack_scale * per_sqrt_k,
        alpha_tilde=alpha_tilde,
        noise=noise,
    )


def adapt_norm_second_cols(n_hat: float, gamma_bar: float, cfg: FmeConfig, pads: int) -> int:
    """Round-two width max(ceil(min(n^2 eps^2/log(1/delta), n d) (n_hat+gamma)^2 / (G^2 P)), 2)."""
    n, eps = cfg.n, cfg.budget.epsilon
    scale = min((n * eps) ** 2 / cfg.budget.log_inv_delta, n * cfg.d)
    return max(math.ceil(scale * (n_hat + gamma_bar) ** 2 / (cfg.G**2 * pads)), 2)


class CohortSampler:
    """Disjoint cohorts of size n from a seeded permutation of the client pool."""

    def __init__(self, pool_size: int, n: int, seed: int):
        if n < 1:
            raise ValueError("empty cohort")
        if pool_size < n:
            raise ValueError(f"client pool of {pool_size} cannot supply a cohort of {n}")
        self.n = n
        self.pool_size = pool_size
        self._order = make_rng(seed, "cohort").permutation(pool_size)

    def cohort(self, j: int) -> np.ndarray:
        """Indices of the clients in round j (1-based)."""
        lo, hi = (j - 1) * self.n, j * self.n
        if hi > self.pool_size:
            raise ValueError(
                f"round {j} needs {hi} distinct clients but the pool only has {self.pool_size}"
            )
        return np.sort(self._order[lo:hi])


def _as_pool(clients, cfg: FmeConfig) -> np.ndarray:
    pool = np.asarray(clients, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[1] != cfg.d:
        raise ValueError(f"clients must be an (N, {cfg.d}) array, got shape {pool.shape}")
    if pool.shape[0] == 0:
        raise ValueError("empty client pool")
    norms = np.linalg.norm(pool, axis=1)
    if np.any(norms > cfg.G * (1.0 + 1e-9)):
        raise ValueError(f"client vectors must have norm at most G={cfg.G}")
    return pool


def _clipped_messages(op: SketchOperator, vectors: np.ndarray, B: float, debug: bool) -> Iterator[np.ndarray]:
    for c in range(vectors.shape[0]):
        msg = clip_rows(sketch(op, vectors[c]).data, B)
        if debug:
            try:
                assert_sensitivity(msg[None], B)
            except AssertionError as err:
                raise AssertionError(f"cohort position {c}: {err}") from err
        yield msg


def _aggregate(op: SketchOperator, vectors: np.ndarray, cfg: FmeConfig, seed: int, j: int, purpose: str) -> np.ndarray:
    return secagg_sum(
        _clipped_messages(op, vectors, cfg.B, cfg.debug),
        cfg.secagg_mode,
        cfg.field,
        seed=derive_seed(seed, j, purpose, "secagg"),
        round_id=j,
        n=vectors.shape[0],
    )


def resketch_error(second_op: SketchOperator, mu_bar, nu_tilde) -> float:
    """Norm of S~(mu_bar) - nu~, a proxy for the error of mu_bar."""
    target = nu_tilde.data if isinstance(nu_tilde, SketchedVector) else np.asarray(nu_tilde, dtype=np.float64)
    return float(np.linalg.norm(sketch(second_op, mu_bar).data - target))


def adapt_norm_fme(clients, cfg: FmeConfig, seed: int) -> FmeOutcome:
    """Two-round norm-adaptive private mean estimation.

    Round one sends only a P~ x 2 second sketch whose aggregate norm, clipped
    and Laplace-noised, estimates the norm of the mean. Round two sends a
    single count-mean sketch of width C_2 sized from that estimate and
    returns the unsketched Gaussian-noised aggregate, which is unbiased.
    """
    if cfg.protocol != "adapt-norm":
        raise ValueError(f"config protocol is {cfg.protocol!r}, not adapt-norm")
    pool = _as_pool(clients, cfg)
    plan = plan_adapt_norm(cfg)
    B, d = cfg.B, cfg.d
    sampler = CohortSampler(pool.shape[0], cfg.n, seed)

    # round 1: norm estimate only, the first sketch is empty
    second_op = SketchOperator(SketchParams(1, plan.second_pads, plan.second_cols, d), derive_seed(seed, 1, "second-sketch"))
    nu_tilde = _aggregate(second_op, pool[sampler.cohort(1)], cfg, seed, 1, "second-sketch")
    n_bar = float(np.linalg.norm(nu_tilde))
    n_hat = min(n_bar, B) + laplace_scalar(plan.noise.stat_noise_scale, make_rng(seed, 1, "stat-noise"))
    cols = adapt_norm_second_cols(n_hat, plan.gamma_bar, cfg, plan.pads)

    # round 2: the sized sketch
    op = SketchOperator(SketchParams(1, plan.pads, cols, d), derive_seed(seed, 2, "first-sketch"))
    nu = _aggregate(op, pool[sampler.cohort(2)], cfg, seed, 2, "first-sketch")
    nu = nu + gaussian_vector(nu.size, plan.noise.mean_noise_std, make_rng(seed, 2, "sketch-noise")).reshape(nu.shape)
    estimate = unsketch_median(op, nu)
    estimate.flags.writeable = False

    return FmeOutcome(
        estimate=estimate,
        scalars_per_round=((0, plan.second_pads * plan.second_cols), (plan.pads * cols, 0)),
        rounds_used=2,
        norm_estimate=n_hat,
        cols=(0, cols),
    )


def _adapt_tail(clients, cfg: FmeConfig, seed: int, topk: bool) -> FmeOutcome:
    pool = _as_pool(clients, cfg)
    plan = plan_adapt_tail(cfg)
    d, n = cfg.d, cfg.n
    sampler = CohortSampler(pool.shape[0], n, seed)
    state = above_threshold_init(plan.threshold, 2.0 * cfg.B / n, cfg.budget.epsilon, make_rng(seed, "above-threshold"))

    scalars, cols_used, errors = [], [], []
    estimate = np.zeros(d)
    cols = plan.first_cols
    for j in range(1, plan.max_rounds + 1):
        k_j = min(2**j, d) if topk else d
        cohort = pool[sampler.cohort(j)]
        op = SketchOperator(SketchParams(plan.rows, plan.pads, cols, d), derive_seed(seed, j, "first-sketch"))
        second_op = SketchOperator(
            SketchParams(1, plan.second_pads, plan.second_cols, d), derive_seed(seed, j, "second-sketch")
        )
        nu = _aggregate(op, cohort, cfg, seed, j, "first-sketch")
        nu = nu + gaussian_vector(nu.size, plan.noise.mean_noise_std, make_rng(seed, j, "sketch-noise")).reshape(nu.shape)
        nu_tilde = _aggregate(second_op, cohort, cfg, seed, j, "second-sketch")

        estimate = top_k(unsketch_median(op, nu), k_j)
        err = resketch_error(second_op, estimate, nu_tilde)
        scalars.append((op.params.length, second_op.params.length))
        cols_used.append(cols)
        errors.append(err)
        if above_threshold_query(state, err, plan.threshold_per_sqrt_k * math.sqrt(k_j)):
            break
        cols *= 2

    estimate.flags.writeable = False
    return FmeOutcome(
        estimate=estimate,
        scalars_per_round=tuple(scalars),
        rounds_used=len(scalars),
        halt_index=state.halt_index,
        halted=state.halted,
        cols=tuple(cols_used),
        error_estimates=tuple(errors),
    )


def adapt_tail_fme(clients, cfg: FmeConfig, seed: int) -> FmeOutcome:
    """Unbiased tail-adaptive protocol: doubling widths, no truncation.

    Stops at the first round whose noisy re-sketched error falls below the
    noisy threshold; without a halt it returns the last round's estimate with
    ``halted=False``.
    """
    if cfg.protocol != "adapt-tail-unbiased":
        raise ValueError(f"config protocol is {cfg.protocol!r}, not adapt-tail-unbiased")
    return _adapt_tail(clients, cfg, seed, topk=False)


def adapt_tail_topk_fme(clients, cfg: FmeConfig, seed: int) -> FmeOutcome:
    """Top-k tail-adaptive protocol with k_j = 2^j and a threshold growing like sqrt(k_j)."""
    if cfg.protocol != "adapt-tail-topk":
        raise ValueError(f"config protocol is {cfg.protocol!r}, not adapt-tail-topk")
    return _adapt_tail(clients, cfg, seed, topk=True)


def run_fme(clients, cfg: FmeConfig, seed: int) -> FmeOutcome:
    """Dispatch on ``cfg.protocol``."""
    runner = {
        "adapt-norm": adapt_norm_fme,
        "adapt-tail-unbiased": adapt_tail_fme,
        "adapt-tail-topk": adapt_tail_topk_fme,
    }[cfg.protocol]
    return runner(clients, cfg, seed)


# -- synthetic client pools -------------------------------------------------


def norm_pool(pool_size: int, d: int, G: float, mean_norm: float, rng: np.random.Generator) -> np.ndarray:
    """Clients of norm exactly G whose pool mean has norm ``mean_norm``.

    Each client is mean_norm*u + sqrt(G^2 - mean_norm^2)*v with v orthogonal
    to the common direction u; the v's come in +/- pairs so they cancel.
    """
    if pool_size < 2 or pool_size % 2:
        raise ValueError("pool_size must be a positive even number")
    if not 0 <= mean_norm <= G:
        raise ValueError("mean_norm must lie in [0, G]")
    if d < 2 and mean_norm < G:
        raise ValueError("need d >= 2 for a spread pool")
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    half = rng.normal(size=(pool_size // 2, d))
    half -= np.outer(half @ u, u)
    norms = np.linalg.norm(half, axis=1, keepdims=True)
    half = half / np.where(norms > 0, norms, 1.0)
    spread = math.sqrt(max(G**2 - mean_norm**2, 0.0))
    pool = mean_norm * u + spread * np.concatenate([half, -half])
    # guard against rounding pushing a norm just above G
    return pool * np.minimum(1.0, G / np.linalg.norm(pool, axis=1, keepdims=True))


def sparse_mean(d: int, k: int, norm: float, rng: np.random.Generator) -> np.ndarray:
    """A k-sparse vector of the given norm with random support and signs."""
    if not 0 <= k <= d:
        raise ValueError("k must lie in [0, d]")
    mu = np.zeros(d)
    if k == 0:
        return mu
    support = rng.choice(d, size=k, replace=False)
    mu[support] = rng.normal(size=k)
    return mu * (norm / np.linalg.norm(mu))
