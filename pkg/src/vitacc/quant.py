"""Fixed-point and power-of-two (PoT) quantizers.

Both schemes are symmetric and sign-magnitude: a ``b``-bit code spends one
bit on the sign and represents ``2**b - 1`` levels.

* Fixed: ``value = scale * q / (2**(b-1) - 1)`` with integer ``q`` in
  ``[-(2**(b-1)-1), 2**(b-1)-1]``.
* PoT: ``value = sign * scale * 2**-e`` with ``e`` in ``[0, 2**(b'-1) - 2]``,
  plus an exact zero.

Weights carry one scale per row, activations one scale per tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

MIN_BITS = 2
MAX_BITS = 8


def _check_bits(b: int, name: str = "b") -> None:
    if not isinstance(b, (int, np.integer)) or not MIN_BITS <= b <= MAX_BITS:
        raise ValueError(f"{name} must be an integer in [{MIN_BITS}, {MAX_BITS}], got {b!r}")


def _as_finite(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("quantizer input contains non-finite values")
    return arr


def fixed_levels(b: int) -> int:
    """Largest fixed-point code magnitude, ``2**(b-1) - 1``."""
    return (1 << (b - 1)) - 1


def max_pot_shift(b_prime: int) -> int:
    """Largest PoT exponent ``E = 2**(b'-1) - 2``."""
    return (1 << (b_prime - 1)) - 2


def aligned_pot_bitwidth(b: int) -> int:
    """PoT weight bit-width whose shifted products fit the fixed-point lane.

    ``b' = floor(log2 b) + 1``, the largest ``b'`` with ``2**(b'-1) <= b``.
    """
    _check_bits(b)
    return int(b).bit_length()


@dataclass(frozen=True)
class BitWidths:
    """Fixed-point/activation bit-width ``b`` and PoT weight bit-width ``b_prime``."""

    b: int
    b_prime: int

    def __post_init__(self):
        _check_bits(self.b, "b")
        _check_bits(self.b_prime, "b_prime")
        if self.b_prime > self.b:
            raise ValueError(f"b_prime={self.b_prime} exceeds b={self.b}")
        if 1 << (self.b_prime - 1) > self.b:
            raise ValueError(
                f"b_prime={self.b_prime} breaks output alignment 2**(b_prime-1) <= b={self.b}"
            )

    @classmethod
    def aligned(cls, b: int) -> "BitWidths":
        return cls(b, aligned_pot_bitwidth(b))

    @property
    def max_shift(self) -> int:
        return max_pot_shift(self.b_prime)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    whole = np.floor(mag)
    # mag - whole is exact for |x| < 2**52
    up = (mag - whole) >= 0.5
    return np.copysign(whole + up, x)


def calibrate_scale(values) -> float:
    """Max-abs scale; an all-zero input gets scale 1.0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot calibrate a scale from an empty vector")
    m = float(np.max(np.abs(arr)))
    if not np.isfinite(m):
        raise ValueError("quantizer input contains non-finite values")
    return m if m > 0 else 1.0


@dataclass(frozen=True)
class FixedQuantizedRow:
    q: np.ndarray
    scale: float
    b: int

    scheme = "fixed"

    def dequantize(self) -> np.ndarray:
        return self.scale * self.q.astype(np.float64) / fixed_levels(self.b)


@dataclass(frozen=True)
class PotQuantizedRow:
    """PoT codes as parallel ``signs`` (-1/0/+1) and ``exps`` arrays."""

    signs: np.ndarray
    exps: np.ndarray
    scale: float
    b_prime: int

    scheme = "pot"

    @property
    def codes(self) -> list[tuple[int, int]]:
        return [(int(s), int(e)) for s, e in zip(self.signs, self.exps)]

    def dequantize(self) -> np.ndarray:
        return self.signs * self.scale * np.ldexp(1.0, -self.exps.astype(np.int64))


@dataclass(frozen=True)
class FixedQuantizedTensor:
    """Activation tensor with a single per-tensor scale."""

    q: np.ndarray
    scale: float
    b: int

    def dequantize(self) -> np.ndarray:
        return self.scale * self.q.astype(np.float64) / fixed_levels(self.b)


QuantizedRow = Union[FixedQuantizedRow, PotQuantizedRow]


def _fixed_codes(values: np.ndarray, b: int, scale: float) -> np.ndarray:
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale!r}")
    lim = fixed_levels(b)
    q = round_half_away(values * lim / scale)
    return np.clip(q, -lim, lim).astype(np.int64)


def fixed_quantize(values, b: int, scale: float) -> FixedQuantizedRow:
    _check_bits(b)
    arr = _as_finite(values)
    return FixedQuantizedRow(_fixed_codes(arr, b, scale), float(scale), int(b))


def pot_grid(b_prime: int) -> np.ndarray:
    """Non-negative PoT magnitudes for unit scale, ascending: ``[0, 2**-E, ..., 1]``."""
    e_max = max_pot_shift(b_prime)
    return np.concatenate(([0.0], np.ldexp(1.0, -np.arange(e_max, -1, -1))))


def pot_quantize(values, b_prime: int, scale: float) -> PotQuantizedRow:
    """Nearest-neighbour PoT quantization; ties go to the smaller magnitude."""
    _check_bits(b_prime, "b_prime")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale!r}")
    arr = _as_finite(values)
    flat = arr.ravel()
    grid = pot_grid(b_prime)
    mag = np.abs(flat) / scale
    # argmin returns the first minimum, i.e. the smaller magnitude on ties
    idx = np.argmin(np.abs(mag[:, None] - grid[None, :]), axis=1)
    e_max = max_pot_shift(b_prime)
    nonzero = idx > 0
    signs = np.where(nonzero, np.sign(flat), 0).astype(np.int64)
    exps = np.where(nonzero, e_max + 1 - idx, 0).astype(np.int64)
    return PotQuantizedRow(signs.reshape(arr.shape), exps.reshape(arr.shape), float(scale), int(b_prime))


def dequantize_row(row: QuantizedRow) -> np.ndarray:
    return row.dequantize()


def quantize_activations(values, b: int) -> FixedQuantizedTensor:
    """Per-tensor max-abs fixed-point quantization of an activation tensor."""
    _check_bits(b)
    arr = _as_finite(values)
    scale = calibrate_scale(arr) if arr.size else 1.0
    return FixedQuantizedTensor(_fixed_codes(arr, b, scale), scale, int(b))
