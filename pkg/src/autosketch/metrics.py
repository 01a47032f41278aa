"""Error, tail-norm, sparsity and communication accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np


@dataclass
class CommLedger:
    """Scalars sent per client per round.

    Attributes:
        d: model (or vector) dimension.
        first: first-sketch scalars L_t for each round.
        second: second-sketch scalars for each round.
        bits_per_scalar: reporting convention for ``total_bits``.
    """

    d: int
    first: list[int] = field(default_factory=list)
    second: list[int] = field(default_factory=list)
    bits_per_scalar: int = 32

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if len(self.first) != len(self.second):
            raise ValueError("first and second scalar lists must have equal length")
        if any(x < 0 for x in self.first) or any(x < 0 for x in self.second):
            raise ValueError("scalar counts must be nonnegative")

    def record(self, first: int, second: int = 0):
        if first < 0 or second < 0:
            raise ValueError("scalar counts must be nonnegative")
        self.first.append(int(first))
        self.second.append(int(second))

    @property
    def rounds(self) -> int:
        return len(self.first)

    @property
    def total_scalars(self) -> int:
        return sum(self.first) + sum(self.second)

    @property
    def total_bits(self) -> int:
        return self.total_scalars * self.bits_per_scalar


def compression_rate(ledger: CommLedger) -> float:
    """d*T divided by all scalars sent: the harmonic mean of per-round rates."""
    if ledger.rounds < 1:
        raise ValueError("compression rate needs at least one round")
    total = ledger.total_scalars
    if total <= 0:
        raise ValueError("compression rate undefined when nothing was sent")
    return ledger.d * ledger.rounds / total


def _sorted_magnitudes(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("expected a vector")
    # stable order on -|z| keeps the lowest index first among ties, as in top_k
    return np.abs(z)[np.argsort(-np.abs(z), kind="stable")]


def tail_norm(z, k: int, G: float = 1.0) -> float:
    """Norm of z outside its k largest-magnitude entries, divided by G."""
    mags = _sorted_magnitudes(z)
    if int(k) != k or not 0 <= k <= mags.shape[0]:
        raise ValueError(f"k must be an integer in [0, {mags.shape[0]}]")
    if not G > 0:
        raise ValueError("G must be positive")
    return float(np.sqrt(np.sum(mags[int(k):] ** 2))) / G


class KTail(NamedTuple):
    k: int
    satisfied: bool


def k_tail(g: Callable[[int], float], mu, G: float = 1.0) -> KTail:
    """Smallest k in [0, d] with tail_norm(mu, k)^2 <= g(k).

    Returns ``KTail(d, False)`` when no k qualifies.
    """
    if not G > 0:
        raise ValueError("G must be positive")
    mags = _sorted_magnitudes(mu)
    d = mags.shape[0]
    sq = mags**2 / G**2
    # tails[k] = sum of squares beyond the first k sorted entries
    tails = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
    for k in range(d + 1):
        if tails[k] <= g(k):
            return KTail(k, True)
    return KTail(d, False)


def mse(estimate, truth) -> float:
    """Squared l2 error of one estimate; average it over trials for the MSE."""
    e = np.asarray(estimate, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
    diff = e - t
    return float(diff @ diff) if diff.ndim == 1 else float(np.sum(diff**2))


def cumulative_compression(d: int, first: Sequence[int], second: Sequence[int]) -> list[float]:
    """Running harmonic compression rate after each round."""
    out, total = [], 0
    for t, (a, b) in enumerate(zip(first, second), start=1):
        total += a + b
        out.append(d * t / total if total > 0 else float("inf"))
    return out
