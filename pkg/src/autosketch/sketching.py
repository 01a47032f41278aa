"""Seeded count-mean and count-median-of-means sketches.

A sketch has R independent rows. Each row stacks P count sketches ("pads") of
width C and scales them by 1/sqrt(P), so a row is a length P*C vector and the
row map is norm preserving in expectation. Unsketching a row applies the
transpose; unsketching the whole sketch takes a coordinatewise median over the
R row estimates.

Bucket and sign hashes are pure functions of (seed, row, pad, coordinate),
computed with a keyed SplitMix64 chain, so an operator is fully described by
its parameters and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import MASK64, mix64, mix64_array

_HASH_TAG = 0x5EED5C0DE5EED5C0


@dataclass(frozen=True)
class SketchParams:
    """Sketch geometry: R rows of P pads with C buckets each, input dim d."""

    rows: int
    pads: int
    cols: int
    dim: int

    def __post_init__(self):
        for name in ("rows", "pads", "cols", "dim"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def row_length(self) -> int:
        return self.pads * self.cols

    @property
    def length(self) -> int:
        """Scalars per client message, R*P*C."""
        return self.rows * self.pads * self.cols


def _row_pad_keys(seed: int, rows: int, pads: int) -> np.ndarray:
    base = mix64((int(seed) & MASK64) ^ _HASH_TAG)
    keys = np.empty((rows, pads), dtype=np.uint64)
    for i in range(rows):
        ki = mix64(base ^ i)
        for p in range(pads):
            keys[i, p] = mix64(ki ^ p)
    return keys


def _hash64(keys: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return mix64_array(keys[..., None] ^ coords.astype(np.uint64))


def _bucket_and_sign(h: np.ndarray, cols: int) -> tuple[np.ndarray, np.ndarray]:
    # high 32 bits pick the bucket (multiply-shift), the low bit picks the sign
    bucket = ((h >> np.uint64(32)) * np.uint64(cols)) >> np.uint64(32)
    sign = 1.0 - 2.0 * (h & np.uint64(1)).astype(np.float64)
    return bucket.astype(np.int64), sign


class SketchOperator:
    """Immutable linear sketching map defined by ``(params, seed)``.

    Hash tables are materialized once at construction as read-only arrays of
    shape (R, P, d); the operator can be shared freely between threads.
    """

    __slots__ = ("params", "seed", "buckets", "signs", "_flat", "_scale")

    def __init__(self, params: SketchParams, seed: int):
        self.params = params
        self.seed = int(seed) & MASK64
        R, P, C, d = params.rows, params.pads, params.cols, params.dim
        keys = _row_pad_keys(self.seed, R, P)
        buckets, signs = _bucket_and_sign(_hash64(keys, np.arange(d)), C)
        offsets = (np.arange(R)[:, None] * P + np.arange(P)[None, :]) * C
        flat = buckets + offsets[..., None]
        for arr in (buckets, signs, flat):
            arr.flags.writeable = False
        self.buckets = buckets
        self.signs = signs
        self._flat = flat
        self._scale = 1.0 / math.sqrt(P)

    def __repr__(self):
        p = self.params
        return f"SketchOperator(R={p.rows}, P={p.pads}, C={p.cols}, d={p.dim}, seed={self.seed})"

    def __eq__(self, other):
        if not isinstance(other, SketchOperator):
            return NotImplemented
        return self.params == other.params and self.seed == other.seed

    def __hash__(self):
        return hash((self.params, self.seed))


@dataclass
class SketchedVector:
    """Sketch payload of shape (R, P*C)."""

    data: np.ndarray
    params: SketchParams

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = (self.params.rows, self.params.row_length)
        if self.data.shape != expected:
            raise ValueError(f"sketch data has shape {self.data.shape}, expected {expected}")

    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, SketchedVector):
            if other.params != self.params:
                raise ValueError("cannot combine sketches with different parameters")
            return other.data
        return np.asarray(other, dtype=np.float64)

    def __add__(self, other):
        return SketchedVector(self.data + self._coerce(other), self.params)

    __radd__ = __add__

    def __sub__(self, other):
        return SketchedVector(self.data - self._coerce(other), self.params)

    def __mul__(self, scalar: float):
        return SketchedVector(self.data * float(scalar), self.params)

    __rmul__ = __mul__

    def __neg__(self):
        return SketchedVector(-self.data, self.params)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))


def _check_index(name: str, value: int, bound: int):
    if not 0 <= value < bound:
        raise ValueError(f"{name}={value} out of range [0, {bound})")


def hash_bucket(op: SketchOperator, row: int, pad: int, coord: int) -> int:
    """Bucket h_p^(row)(coord) in [0, C)."""
    p = op.params
    _check_index("row", row, p.rows)
    _check_index("pad", pad, p.pads)
    _check_index("coord", coord, p.dim)
    return int(op.buckets[row, pad, coord])


def hash_sign(op: SketchOperator, row: int, pad: int, coord: int) -> int:
    """Sign s_p^(row)(coord) in {-1, +1}."""
    p = op.params
    _check_index("row", row, p.rows)
    _check_index("pad", pad, p.pads)
    _check_index("coord", coord, p.dim)
    return int(op.signs[row, pad, coord])


def _as_input(op: SketchOperator, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != op.params.dim:
        raise ValueError(f"expected a vector of length {op.params.dim}, got shape {z.shape}")
    return z


def sketch(op: SketchOperator, z) -> SketchedVector:
    """Apply the sketch to a length-d vector.

    Entry (row i, pad p, bucket c) is (1/sqrt(P)) * sum of s(q) z_q over the
    coordinates hashed to c, accumulated in ascending coordinate order.
    """
    z = _as_input(op, z)
    p = op.params
    weights = (op.signs * z).ravel()
    data = np.bincount(op._flat.ravel(), weights=weights, minlength=p.length)
    return SketchedVector((data * op._scale).reshape(p.rows, p.row_length), p)


def sketch_many(op: SketchOperator, vectors) -> np.ndarray:
    """Sketch each row of an (n, d) array; returns an (n, R, P*C) array."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("expected a 2-D array of client vectors")
    p = op.params
    out = np.empty((vectors.shape[0], p.rows, p.row_length))
    for c in range(vectors.shape[0]):
        out[c] = sketch(op, vectors[c]).data
    return out


def _row_data(op: SketchOperator, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (op.params.row_length,):
        raise ValueError(f"expected a sketch row of length {op.params.row_length}, got shape {s.shape}")
    return s


def unsketch_row(op: SketchOperator, row: int, s) -> np.ndarray:
    """Transpose-apply one sketch row: an unbiased estimate of the input."""
    _check_index("row", row, op.params.rows)
    s = _row_data(op, s)
    local = op._flat[row] - row * op.params.row_length
    return (s[local] * op.signs[row]).sum(axis=0) * op._scale


def unsketch_rows(op: SketchOperator, s: SketchedVector | np.ndarray) -> np.ndarray:
    """All R row estimates, shape (R, d)."""
    data = s.data if isinstance(s, SketchedVector) else np.asarray(s, dtype=np.float64)
    p = op.params
    if data.shape != (p.rows, p.row_length):
        raise ValueError(f"sketch data has shape {data.shape}, expected {(p.rows, p.row_length)}")
    return (data.ravel()[op._flat] * op.signs).sum(axis=1) * op._scale


def unsketch_median(op: SketchOperator, s: SketchedVector | np.ndarray) -> np.ndarray:
    """Coordinatewise median of the R row estimates.

    For even R the median is the mean of the two central order statistics,
    which keeps the error distribution symmetric about zero.
    """
    estimates = unsketch_rows(op, s)
    if estimates.shape[0] == 1:
        return estimates[0]
    return np.median(estimates, axis=0)


def top_k(v, k: int) -> np.ndarray:
    """Keep the k largest-magnitude entries, zero the rest; ties go to the lower index."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("top_k expects a vector")
    if int(k) != k or not 0 <= k <= v.shape[0]:
        raise ValueError(f"k must be an integer in [0, {v.shape[0]}], got {k!r}")
    k = int(k)
    if k == v.shape[0]:
        return v.copy()
    out = np.zeros_like(v)
    if k == 0:
        return out
    keep = np.argsort(-np.abs(v), kind="stable")[:k]
    out[keep] = v[keep]
    return out


def clip(v, B: float) -> np.ndarray:
    """Rescale v to norm at most B."""
    if not B > 0:
        raise ValueError(f"clip bound must be positive, got {B!r}")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= B:
        return v.copy()
    return v * (B / norm)


def clip_rows(rows, B: float) -> np.ndarray:
    """Clip every vector along the last axis to norm at most B."""
    if not B > 0:
        raise ValueError(f"clip bound must be positive, got {B!r}")
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    scale = np.minimum(1.0, B / np.maximum(norms, np.finfo(np.float64).tiny))
    return rows * scale
