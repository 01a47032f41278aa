"""Noise mechanisms, noise-scale calibration and the AboveThreshold rule.

Noise is always added server side to an *average* of clipped client messages.
``NoiseConfig`` therefore carries, besides the raw calibrated scales, the two
scales the protocols actually apply:

* ``mean_noise_std``: per-entry Gaussian std added to the averaged sketch;
* ``stat_noise_scale``: scale of the noise added to a scalar statistic
  (norm or error estimate) computed from the averaged second sketch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# variance split between sketch noise and scalar-statistic noise in the FL protocols
SKETCH_SHARE = 0.9
STAT_SHARE = 0.1

FME_PROTOCOLS = ("adapt-norm-fme", "adapt-tail-fme")
FL_SPLIT_PROTOCOLS = ("adapt-norm-fl", "adapt-tail-fl", "two-stage-fl")
FL_FULL_PROTOCOLS = ("dp-fedavg", "fixed-sketch-fl")
PROTOCOLS = FME_PROTOCOLS + FL_SPLIT_PROTOCOLS + FL_FULL_PROTOCOLS


class SensitivityError(AssertionError):
    """A client message row exceeds the clipping bound."""

    def __init__(self, client: int, row: int, norm: float, bound: float):
        super().__init__(f"client {client} row {row} has norm {norm:.6g} > clip bound {bound:.6g}")
        self.client = client
        self.row = row
        self.norm = norm
        self.bound = bound


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta!r}")

    @property
    def log_inv_delta(self) -> float:
        return math.log(1.0 / self.delta)


@dataclass(frozen=True)
class NoiseConfig:
    """Calibrated noise scales for one protocol.

    Attributes:
        sigma: Gaussian scale for sketch entries at the scale of a sum of
            clipped messages (the sum-level sigma).
        sigma_tilde: scale of the scalar-statistic noise as the protocol
            defines it (average level for the FME protocols, sum level for FL).
        clip_bound: per-row clipping bound B.
        n: cohort size.
        protocol: calibration tag.
        scalar_noise: "laplace" or "gaussian" for the scalar statistic.
        mean_noise_std: Gaussian std added per entry of the averaged sketch.
        stat_noise_scale: noise scale added to the averaged-level statistic.
    """

    sigma: float
    sigma_tilde: float
    clip_bound: float
    n: int = 1
    protocol: str = ""
    scalar_noise: str = "laplace"
    mean_noise_std: float = 0.0
    stat_noise_scale: float = 0.0


def calibrate(
    budget: PrivacyBudget | None,
    B: float,
    n: int,
    protocol: str,
    *,
    d: int | None = None,
    rows: int = 1,
    noise_multiplier: float | None = None,
) -> NoiseConfig:
    """Noise scales for ``protocol``.

    FME protocols take an (epsilon, delta) budget; FL protocols take a noise
    multiplier instead (their accounting is delegated to the caller).

    Args:
        budget: privacy budget, required for the FME tags.
        B: clipping bound.
        n: cohort size.
        protocol: one of ``PROTOCOLS``.
        d: dimension, required for ``adapt-tail-fme``.
        rows: sketch rows R; each clipped row adds B to the sensitivity in
            quadrature, so sketch noise grows with sqrt(R) for FL tags.
        noise_multiplier: required for the FL tags.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol tag {protocol!r}; expected one of {PROTOCOLS}")
    if not B > 0:
        raise ValueError(f"clip bound must be positive, got {B!r}")
    if int(n) != n or n < 1:
        raise ValueError(f"cohort size must be a positive integer, got {n!r}")
    if int(rows) != rows or rows < 1:
        raise ValueError(f"rows must be a positive integer, got {rows!r}")
    n = int(n)

    if protocol in FME_PROTOCOLS:
        if budget is None:
            raise ValueError(f"{protocol} requires a privacy budget")
        eps = budget.epsilon
        if protocol == "adapt-norm-fme":
            var = 256.0 * B**2 * budget.log_inv_delta / eps**2
        else:
            if d is None or d < 2:
                raise ValueError("adapt-tail-fme calibration needs d >= 2")
            var = 256.0 * rows * math.log(d) ** 2 * B**2 * budget.log_inv_delta / eps**2
        sigma = math.sqrt(var)
        sigma_tilde = 4.0 * B / (n * eps)
        return NoiseConfig(
            sigma=sigma,
            sigma_tilde=sigma_tilde,
            clip_bound=B,
            n=n,
            protocol=protocol,
            scalar_noise="laplace",
            mean_noise_std=sigma / n,
            stat_noise_scale=sigma_tilde,
        )

    if noise_multiplier is None or not noise_multiplier >= 0:
        raise ValueError(f"{protocol} requires a nonnegative noise_multiplier")
    z = float(noise_multiplier)
    if protocol in FL_FULL_PROTOCOLS:
        sigma = z * B * (math.sqrt(rows) if protocol == "fixed-sketch-fl" else 1.0)
        return NoiseConfig(sigma, 0.0, B, n, protocol, "gaussian", sigma / n, 0.0)
    sigma = z * B * math.sqrt(rows) / math.sqrt(SKETCH_SHARE)
    sigma_tilde = z * B / math.sqrt(STAT_SHARE)
    return NoiseConfig(sigma, sigma_tilde, B, n, protocol, "gaussian", sigma / n, sigma_tilde / n)


def gaussian_vector(length: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. N(0, scale^2) entries; scale 0 gives exact zeros."""
    if length < 0 or not scale >= 0:
        raise ValueError("length and scale must be nonnegative")
    if scale == 0:
        return np.zeros(length)
    return rng.normal(0.0, scale, size=length)


def gaussian_scalar(scale: float, rng: np.random.Generator) -> float:
    if not scale >= 0:
        raise ValueError("scale must be nonnegative")
    return 0.0 if scale == 0 else float(rng.normal(0.0, scale))


def laplace_scalar(scale: float, rng: np.random.Generator) -> float:
    """One Laplace(0, scale) draw; scale 0 gives 0."""
    if not scale >= 0:
        raise ValueError("scale must be nonnegative")
    return 0.0 if scale == 0 else float(rng.laplace(0.0, scale))


def scalar_noise(cfg: NoiseConfig, rng: np.random.Generator) -> float:
    """Noise for the scalar statistic, drawn from the protocol's distribution."""
    if cfg.scalar_noise == "laplace":
        return laplace_scalar(cfg.stat_noise_scale, rng)
    return gaussian_scalar(cfg.stat_noise_scale, rng)


@dataclass
class AboveThresholdState:
    """Sequential-use state of one AboveThreshold instance."""

    noisy_threshold: float
    query_noise_scale: float
    rng: np.random.Generator = field(repr=False)
    halted: bool = False
    halt_index: int | None = None
    queries: int = 0


def above_threshold_init(threshold: float, sensitivity: float, eps_slice: float,
                         rng: np.random.Generator) -> AboveThresholdState:
    """Start AboveThreshold with threshold noise Laplace(2*sensitivity/eps).

    Queries then receive Laplace noise of twice that scale.
    """
    if not sensitivity >= 0 or not eps_slice > 0:
        raise ValueError("sensitivity must be nonnegative and eps_slice positive")
    scale = 2.0 * sensitivity / eps_slice
    noisy = float(threshold) + laplace_scalar(scale, rng)
    return AboveThresholdState(noisy_threshold=noisy, query_noise_scale=2.0 * scale, rng=rng)


def above_threshold_query(state: AboveThresholdState, error_value: float,
                          moving_threshold_offset: float = 0.0) -> bool:
    """Return True (and halt) iff the noisy query falls at or below the noisy threshold.

    ``moving_threshold_offset`` is subtracted from the query, which is how a
    round-dependent threshold is expressed against a fixed noisy threshold.
    """
    if state.halted:
        raise RuntimeError("AboveThreshold already halted; no further queries allowed")
    state.queries += 1
    noisy = float(error_value) - float(moving_threshold_offset) + laplace_scalar(state.query_noise_scale, state.rng)
    if noisy <= state.noisy_threshold:
        state.halted = True
        state.halt_index = state.queries
    return state.halted


def above_threshold_alpha(sensitivity: float, eps_slice: float, T: int, beta: float) -> float:
    """Accuracy radius 8*B_s*(log T + log(2/beta))/eps of AboveThreshold over T queries."""
    return 8.0 * sensitivity * (math.log(T) + math.log(2.0 / beta)) / eps_slice


def assert_sensitivity(messages, B: float, n: int | None = None, rtol: float = 1e-9) -> float:
    """Check that every client message row has norm at most B.

    Args:
        messages: array of shape (n, L) or (n, R, L).
        B: clipping bound.
        n: cohort size; defaults to the number of messages.
        rtol: relative slack for floating-point rounding of clipped rows.

    Returns:
        The implied replace-one sensitivity 2B/n of the averaged aggregate.

    Raises:
        SensitivityError: naming the first offending (client, row).
    """
    msgs = np.asarray(messages, dtype=np.float64)
    if msgs.ndim == 2:
        msgs = msgs[:, None, :]
    if msgs.ndim != 3:
        raise ValueError("messages must have shape (n, L) or (n, R, L)")
    norms = np.linalg.norm(msgs, axis=-1)
    bad = np.argwhere(norms > B * (1.0 + rtol))
    if bad.size:
        c, r = (int(x) for x in bad[0])
        raise SensitivityError(c, r, float(norms[c, r]), B)
    n = msgs.shape[0] if n is None else n
    return 2.0 * B / n
