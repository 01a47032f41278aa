"""Pluggable private mean estimators for the federated averaging loop.

Every estimator receives the clipped client updates of one round and returns
a ``RoundEstimate``: the noisy mean plus the communication and noise it used.
Adaptive estimators carry state between rounds (the next sketch width) and
are reset by the training loop at the start of each run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..fme import resketch_error
from ..privacy import NoiseConfig, calibrate, gaussian_scalar, gaussian_vector
from ..secagg import MODES, FieldConfig, secagg_sum
from ..seeding import derive_seed, make_rng
from ..sketching import SketchOperator, SketchParams, clip_rows, sketch, unsketch_median

ESTIMATORS = ("exact", "dp", "fixed-sketch", "adapt-norm", "two-stage", "adapt-tail")
TAIL_RULES = ("sign", "exponential", "linear")

# squared norm padding, in units of the per-round noise scale
NORM_PAD_SQ = 20.0


@dataclass(frozen=True)
class FlConfig:
    """Federated training and estimator settings.

    Attributes:
        rounds: number of rounds K.
        clients_per_round: cohort size n.
        noise_multiplier: sigma; noise std on the summed updates is sigma*B.
        clip: clipping bound B for updates and sketch rows.
        c0: target ratio of compression error to privacy error.
        warmup: uncompressed warm-up rounds W of the two-stage estimator.
        eta: multiplicative step of the adaptive-tail width update.
        server_lr: server learning rate.
        client_lr: client SGD learning rate.
        server_momentum: server heavy-ball momentum.
        local_steps: client SGD steps per round.
        batch_size: client minibatch size, 0 for full batch.
        estimator: one of ``ESTIMATORS``.
        rows: first-sketch rows R; None means ceil(log d).
        pads: first-sketch pads P; None means ceil(log d).
        second_rows: second-sketch rows.
        second_pads: second-sketch pads; None means ceil(log d).
        second_cols: second-sketch width.
        initial_cols: first-round width of adaptive estimators; None means the cap.
        compression: target rate of the fixed-sketch estimator.
        tail_rule: width update of the adaptive-tail estimator.
        tail_relative: measure the tail error relative to the threshold.
        l1_zero_threshold: zero updates whose l1 norm exceeds this value.
        secagg_mode: "ideal" or "masked".
        field: ring settings for masked mode.
    """

    rounds: int = 100
    clients_per_round: int = 10
    noise_multiplier: float = 0.0
    clip: float = 1.0
    c0: float = 0.1
    warmup: int = 75
    eta: float = 0.2
    server_lr: float = 1.0
    client_lr: float = 0.1
    server_momentum: float = 0.9
    local_steps: int = 1
    batch_size: int = 0
    estimator: str = "adapt-norm"
    rows: int | None = None
    pads: int | None = None
    second_rows: int = 1
    second_pads: int | None = None
    second_cols: int = 2
    initial_cols: int | None = None
    compression: float = 1.0
    tail_rule: str = "sign"
    tail_relative: bool = False
    l1_zero_threshold: float | None = None
    secagg_mode: str = "ideal"
    field: FieldConfig = FieldConfig()

    def __post_init__(self):
        def positive_int(name, allow_zero=False):
            v = getattr(self, name)
            lo = 0 if allow_zero else 1
            if isinstance(v, bool) or int(v) != v or v < lo:
                raise ValueError(f"{name} must be an integer >= {lo}, got {v!r}")

        positive_int("rounds", allow_zero=True)
        positive_int("clients_per_round")
        positive_int("warmup", allow_zero=True)
        positive_int("local_steps", allow_zero=True)
        positive_int("batch_size", allow_zero=True)
        positive_int("second_rows")
        positive_int("second_cols")
        for name in ("rows", "pads", "second_pads", "initial_cols"):
            if getattr(self, name) is not None:
                positive_int(name)
        if not self.noise_multiplier >= 0:
            raise ValueError("noise_multiplier must be nonnegative")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if not self.compression >= 1:
            raise ValueError("compression must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.estimator == "two-stage" and self.warmup > self.rounds:
            raise ValueError("warmup cannot exceed rounds")
        if self.tail_rule not in TAIL_RULES:
            raise ValueError(f"unknown tail_rule {self.tail_rule!r}; expected one of {TAIL_RULES}")
        if self.secagg_mode not in MODES:
            raise ValueError(f"unknown secagg mode {self.secagg_mode!r}")
        if self.l1_zero_threshold is not None and not self.l1_zero_threshold > 0:
            raise ValueError("l1_zero_threshold must be positive")


@dataclass(frozen=True)
class Geometry:
    """Sketch shapes for a model of dimension d."""

    d: int
    rows: int
    pads: int
    second_rows: int
    second_pads: int
    second_cols: int

    @property
    def max_cols(self) -> int:
        """Widest first sketch that is no larger than the raw update."""
        return max(1, self.d // (self.rows * self.pads))

    @property
    def min_cols(self) -> int:
        return min(2, self.max_cols)

    def clamp(self, cols: float) -> int:
        return int(min(max(math.ceil(cols), self.min_cols), self.max_cols))

    @property
    def second_length(self) -> int:
        return self.second_rows * self.second_pads * self.second_cols


def geometry(cfg: FlConfig, d: int) -> Geometry:
    log_d = max(1, math.ceil(math.log(d))) if d > 1 else 1
    return Geometry(
        d=d,
        rows=cfg.rows or log_d,
        pads=cfg.pads or log_d,
        second_rows=cfg.second_rows,
        second_pads=cfg.second_pads or log_d,
        second_cols=cfg.second_cols,
    )


@dataclass
class RoundEstimate:
    """Output of one estimator call.

    Attributes:
        mean: the private mean estimate.
        cols: first-sketch width C_j, 0 when nothing was sketched.
        first_scalars: scalars each client sent in the main message.
        second_scalars: scalars each client sent in the auxiliary sketch.
        statistic: noisy norm or error estimate, if the estimator makes one.
        sketch_noise_std: Gaussian std added per entry of the averaged message.
        stat_noise_std: Gaussian std added to the statistic.
    """

    mean: np.ndarray
    cols: int
    first_scalars: int
    second_scalars: int
    statistic: float | None = None
    sketch_noise_std: float = 0.0
    stat_noise_std: float = 0.0


class MeanEstimator:
    """Base class: stores the config and handles aggregation plumbing."""

    name = "base"

    def __init__(self, cfg: FlConfig, d: int):
        self.cfg = cfg
        self.d = d
        self.geom = geometry(cfg, d)

    def reset(self):
        """Forget any state carried between rounds."""

    def estimate(self, updates: np.ndarray, round_index: int, seed: int) -> RoundEstimate:
        raise NotImplementedError

    def _noise(self, tag: str, rows: int = 1) -> NoiseConfig:
        return calibrate(None, self.cfg.clip, self.cfg.clients_per_round, tag,
                         rows=rows, noise_multiplier=self.cfg.noise_multiplier)

    def _average(self, messages, n: int, seed: int, j: int, purpose: str) -> np.ndarray:
        return secagg_sum(messages, self.cfg.secagg_mode, self.cfg.field,
                          seed=derive_seed(seed, j, purpose, "secagg"), round_id=j, n=n)

    def _sketch_average(self, op: SketchOperator, updates: np.ndarray, seed: int, j: int, purpose: str) -> np.ndarray:
        B = self.cfg.clip
        messages = (clip_rows(sketch(op, z).data, B) for z in updates)
        return self._average(messages, updates.shape[0], seed, j, purpose)

    def _first_op(self, cols: int, seed: int, j: int) -> SketchOperator:
        g = self.geom
        return SketchOperator(SketchParams(g.rows, g.pads, cols, g.d), derive_seed(seed, j, "first-sketch"))

    def _second_op(self, seed: int, j: int) -> SketchOperator:
        g = self.geom
        return SketchOperator(SketchParams(g.second_rows, g.second_pads, g.second_cols, g.d),
                              derive_seed(seed, j, "second-sketch"))

    def _noisy_sketch_mean(self, op: SketchOperator, updates, std: float, seed: int, j: int) -> np.ndarray:
        nu = self._sketch_average(op, updates, seed, j, "first-sketch")
        nu = nu + gaussian_vector(nu.size, std, make_rng(seed, j, "sketch-noise")).reshape(nu.shape)
        return unsketch_median(op, nu)

    def width_for_norm(self, n_hat: float) -> int:
        """Width that makes compression error about c0 times the privacy error.

        With per-entry noise s = sigma*B/n on the average, the privacy error is
        d*s^2 and a count-mean sketch of P*C buckets adds about d*|mu|^2/(P*C).
        Equating the second to c0 times the first, with |mu| replaced by the
        padded estimate n_hat + sqrt(20)*s, gives C = (n_hat + pad)^2/(c0*P*s^2).
        """
        cfg = self.cfg
        if cfg.noise_multiplier == 0:
            return self.geom.max_cols
        s = cfg.noise_multiplier * cfg.clip / cfg.clients_per_round
        pad = math.sqrt(NORM_PAD_SQ) * s
        return self.geom.clamp((n_hat + pad) ** 2 / (cfg.c0 * self.geom.pads * s**2))


class ExactMean(MeanEstimator):
    """Plain average, no noise, no compression."""

    name = "exact"

    def estimate(self, updates, round_index, seed):
        mean = self._average(updates, updates.shape[0], seed, round_index, "raw")
        return RoundEstimate(mean, 0, self.d, 0)


class GaussianMean(MeanEstimator):
    """Uncompressed Gaussian-mechanism average (DP-FedAvg)."""

    name = "dp"

    def estimate(self, updates, round_index, seed):
        noise = self._noise("dp-fedavg")
        mean = self._average(updates, updates.shape[0], seed, round_index, "raw")
        mean = mean + gaussian_vector(self.d, noise.mean_noise_std, make_rng(seed, round_index, "sketch-noise"))
        return RoundEstimate(mean, 0, self.d, 0, None, noise.mean_noise_std, 0.0)


class FixedSketchMean(MeanEstimator):
    """Fixed-width sketch targeting ``cfg.compression``; one grid point of the Genie search."""

    name = "fixed-sketch"

    def __init__(self, cfg, d):
        super().__init__(cfg, d)
        g = self.geom
        self.cols = max(1, min(g.max_cols, math.floor(d / (cfg.compression * g.rows * g.pads))))

    def estimate(self, updates, round_index, seed):
        noise = self._noise("fixed-sketch-fl", rows=self.geom.rows)
        op = self._first_op(self.cols, seed, round_index)
        mean = self._noisy_sketch_mean(op, updates, noise.mean_noise_std, seed, round_index)
        return RoundEstimate(mean, self.cols, op.params.length, 0, None, noise.mean_noise_std, 0.0)


class AdaptNormMean(MeanEstimator):
    """Norm-adaptive sketching with a stale norm estimate.

    Each round sends the main sketch at the width chosen last round plus a
    small second sketch. The second sketch's aggregate norm, clipped and
    Gaussian-noised, sets the width for the next round.
    """

    name = "adapt-norm"

    def __init__(self, cfg, d):
        super().__init__(cfg, d)
        self.reset()

    def reset(self):
        self.next_cols = self.geom.clamp(self.cfg.initial_cols or self.geom.max_cols)

    def estimate(self, updates, round_index, seed):
        cfg, g, j = self.cfg, self.geom, round_index
        noise = self._noise("adapt-norm-fl", rows=g.rows)
        cols = self.next_cols
        op = self._first_op(cols, seed, j)
        mean = self._noisy_sketch_mean(op, updates, noise.mean_noise_std, seed, j)
        nu_tilde = self._sketch_average(self._second_op(seed, j), updates, seed, j, "second-sketch")
        n_bar = float(np.linalg.norm(nu_tilde)) / math.sqrt(g.second_rows)
        n_hat = min(n_bar, cfg.clip) + gaussian_scalar(noise.stat_noise_scale, make_rng(seed, j, "stat-noise"))
        self.next_cols = self.width_for_norm(n_hat)
        return RoundEstimate(mean, cols, op.params.length, g.second_length, n_hat,
                             noise.mean_noise_std, noise.stat_noise_scale)


class TwoStageMean(MeanEstimator):
    """W uncompressed warm-up rounds that estimate the norm, then a fixed width."""

    name = "two-stage"

    def __init__(self, cfg, d):
        super().__init__(cfg, d)
        self.reset()

    def reset(self):
        self.norm_estimates: list[float] = []
        self.cols: int | None = None

    def estimate(self, updates, round_index, seed):
        cfg, j = self.cfg, round_index
        if j <= cfg.warmup:
            noise = self._noise("two-stage-fl")
            raw = self._average(updates, updates.shape[0], seed, j, "raw")
            mean = raw + gaussian_vector(self.d, noise.mean_noise_std, make_rng(seed, j, "sketch-noise"))
            n_hat = min(float(np.linalg.norm(raw)), cfg.clip) + gaussian_scalar(
                noise.stat_noise_scale, make_rng(seed, j, "stat-noise"))
            self.norm_estimates.append(n_hat)
            return RoundEstimate(mean, 0, self.d, 0, n_hat, noise.mean_noise_std, noise.stat_noise_scale)
        if self.cols is None:
            if self.norm_estimates:
                self.cols = self.width_for_norm(float(np.mean(self.norm_estimates)))
            else:
                self.cols = self.geom.clamp(cfg.initial_cols or self.geom.max_cols)
        noise = self._noise("fixed-sketch-fl", rows=self.geom.rows)
        op = self._first_op(self.cols, seed, j)
        mean = self._noisy_sketch_mean(op, updates, noise.mean_noise_std, seed, j)
        return RoundEstimate(mean, self.cols, op.params.length, 0, None, noise.mean_noise_std, 0.0)


def tail_update(cols: float, excess: float, rule: str, eta: float) -> float:
    """Next (unrounded) width given the error excess over the threshold."""
    if rule == "sign":
        return cols * (1.0 + eta * float(np.sign(excess)))
    if rule == "exponential":
        return cols * (1.0 + eta * excess)
    if rule == "linear":
        return cols + math.floor(eta * excess)
    raise ValueError(f"unknown tail rule {rule!r}")


class AdaptTailMean(MeanEstimator):
    """Error-adaptive sketching: widen when the re-sketched error is above target, else shrink."""

    name = "adapt-tail"

    def __init__(self, cfg, d):
        super().__init__(cfg, d)
        self.reset()

    def reset(self):
        self.width = float(self.geom.clamp(self.cfg.initial_cols or self.geom.max_cols))

    def threshold(self, noise: NoiseConfig) -> float:
        """c0 times the norm of the sketch noise, plus two std of the error noise."""
        return self.cfg.c0 * math.sqrt(self.d) * noise.mean_noise_std + 2.0 * noise.stat_noise_scale

    def estimate(self, updates, round_index, seed):
        cfg, g, j = self.cfg, self.geom, round_index
        noise = self._noise("adapt-tail-fl", rows=g.rows)
        cols = g.clamp(self.width)
        op = self._first_op(cols, seed, j)
        second = self._second_op(seed, j)
        mean = self._noisy_sketch_mean(op, updates, noise.mean_noise_std, seed, j)
        nu_tilde = self._sketch_average(second, updates, seed, j, "second-sketch")
        e_tilde = resketch_error(second, mean, nu_tilde) + gaussian_scalar(
            noise.stat_noise_scale, make_rng(seed, j, "stat-noise"))
        gamma = self.threshold(noise)
        excess = e_tilde - gamma
        if cfg.tail_relative and gamma > 0:
            excess /= gamma
        self.width = min(max(tail_update(self.width, excess, cfg.tail_rule, cfg.eta), g.min_cols), g.max_cols)
        return RoundEstimate(mean, cols, op.params.length, g.second_length, e_tilde,
                             noise.mean_noise_std, noise.stat_noise_scale)


_REGISTRY = {
    "exact": ExactMean,
    "dp": GaussianMean,
    "fixed-sketch": FixedSketchMean,
    "adapt-norm": AdaptNormMean,
    "two-stage": TwoStageMean,
    "adapt-tail": AdaptTailMean,
}


def make_estimator(cfg: FlConfig, d: int) -> MeanEstimator:
    return _REGISTRY[cfg.estimator](cfg, d)
