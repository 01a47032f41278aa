"""Simulated secure aggregation.

Two modes produce the average of the client messages:

* ``ideal``: the exact floating-point sum divided by n;
* ``masked``: every client encodes its vector in fixed point over the ring
  Z / 2^modulus_bits and adds pairwise masks that cancel in the sum. The
  server only ever handles masked payloads and their total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import derive_seed

MODES = ("ideal", "masked")


class SecAggRangeError(ValueError):
    """The fixed-point sum would wrap around the ring."""


@dataclass(frozen=True)
class FieldConfig:
    modulus_bits: int = 64
    scale_bits: int = 20

    def __post_init__(self):
        if self.modulus_bits not in (32, 64):
            raise ValueError(f"modulus_bits must be 32 or 64, got {self.modulus_bits!r}")
        if not 0 <= self.scale_bits < self.modulus_bits - 1:
            raise ValueError(f"scale_bits must lie in [0, {self.modulus_bits - 1}), got {self.scale_bits!r}")

    @property
    def mask(self) -> np.uint64:
        return np.uint64((1 << self.modulus_bits) - 1)

    @property
    def scale(self) -> float:
        return float(2**self.scale_bits)


@dataclass(frozen=True)
class MaskedMessage:
    """A client's encoded and masked payload; meaningless on its own."""

    payload: np.ndarray
    client_id: int
    round_id: int


def _pair_stream(seed: int, round_id: int, a: int, b: int, length: int, field: FieldConfig) -> np.ndarray:
    bits = np.random.PCG64(derive_seed(seed, round_id, "mask", a, b)).random_raw(length)
    return bits.astype(np.uint64) & field.mask


def client_mask(n: int, client: int, round_id: int, seed: int, length: int,
                field: FieldConfig = FieldConfig()) -> np.ndarray:
    """Mask of one client: sum of r_(client,b) for b > client minus r_(a,client) for a < client."""
    if not 0 <= client < n:
        raise ValueError(f"client {client} out of range for n={n}")
    m = np.zeros(length, dtype=np.uint64)
    for other in range(n):
        if other == client:
            continue
        a, b = min(client, other), max(client, other)
        r = _pair_stream(seed, round_id, a, b, length, field)
        m = (m + r) if client == a else (m - r)
    return m & field.mask


def pairwise_masks(n: int, round_id: int, seed: int, length: int,
                   field: FieldConfig = FieldConfig()) -> list[np.ndarray]:
    """n mask vectors over Z / 2^modulus_bits that sum to zero.

    Pair (a, b) with a < b shares a stream r_ab; client a adds r_ab and client
    b subtracts it.
    """
    if n < 1 or length < 0:
        raise ValueError("need n >= 1 and length >= 0")
    return [client_mask(n, c, round_id, seed, length, field) for c in range(n)]


def encode(v, field: FieldConfig) -> np.ndarray:
    """Fixed-point encode a real vector into ring elements (two's complement)."""
    scaled = np.rint(np.asarray(v, dtype=np.float64) * field.scale).astype(np.int64)
    return scaled.astype(np.uint64) & field.mask


def decode(x: np.ndarray, field: FieldConfig) -> np.ndarray:
    """Inverse of ``encode`` for ring elements holding values in the signed range."""
    x = np.asarray(x, dtype=np.uint64) & field.mask
    if field.modulus_bits == 64:
        signed = x.view(np.int64)
    else:
        signed = x.astype(np.int64)
        signed = np.where(signed >= 2**31, signed - 2**32, signed)
    return signed.astype(np.float64) / field.scale


def mask_message(v, client_id: int, mask: np.ndarray, round_id: int, field: FieldConfig) -> MaskedMessage:
    return MaskedMessage((encode(v, field) + mask) & field.mask, client_id, round_id)


def check_range(message: np.ndarray, n: int, field: FieldConfig):
    peak = float(np.max(np.abs(message))) if message.size else 0.0
    if not np.isfinite(peak) or peak * field.scale * n >= 2.0 ** (field.modulus_bits - 1):
        raise SecAggRangeError(
            f"max |value| {peak:.6g} with n={n} overflows a {field.modulus_bits}-bit ring at scale 2^{field.scale_bits}"
        )


def secagg_sum(messages, mode: str = "ideal", field: FieldConfig = FieldConfig(), *,
               seed: int = 0, round_id: int = 0, n: int | None = None) -> np.ndarray:
    """Average of client messages as the server would learn it.

    Messages are consumed one at a time, so ``messages`` may be a generator;
    pass ``n`` when it has no length.

    Args:
        messages: one array per client, all of the same shape.
        mode: "ideal" or "masked".
        field: ring and fixed-point scale for masked mode.
        seed: master seed for the mask streams.
        round_id: round tag for the mask streams.
        n: number of clients, needed for generators.

    Returns:
        The average message.
    """
    if mode not in MODES:
        raise ValueError(f"unknown secagg mode {mode!r}; expected one of {MODES}")
    if n is None:
        try:
            n = len(messages)
        except TypeError:
            raise ValueError("pass n when messages is an iterator") from None
    if n < 1:
        raise ValueError("secagg_sum needs at least one message")
    if mode == "masked" and n < 2:
        raise ValueError("masked mode needs at least two clients")

    total = None
    shape = None
    count = 0
    for c, msg in enumerate(messages):
        msg = np.asarray(msg, dtype=np.float64)
        if shape is None:
            shape = msg.shape
            total = np.zeros(shape) if mode == "ideal" else np.zeros(msg.size, dtype=np.uint64)
        elif msg.shape != shape:
            raise ValueError(f"message {c} has shape {msg.shape}, expected {shape}")
        if mode == "ideal":
            total += msg
        else:
            check_range(msg, n, field)
            mask = client_mask(n, c, round_id, seed, msg.size, field)
            total = (total + mask_message(msg.ravel(), c, mask, round_id, field).payload) & field.mask
        count += 1
    if count != n:
        raise ValueError(f"expected {n} messages, got {count}")
    if mode == "ideal":
        return total / n
    return (decode(total, field) / n).reshape(shape)


def quantization_bound(n: int, field: FieldConfig) -> float:
    """Worst-case per-coordinate gap between masked and ideal averages."""
    return 0.5 / field.scale + math.ulp(1.0) * n
