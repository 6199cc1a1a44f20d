"""Symmetric per-tensor fixed-point quantization with power-of-two scales."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MIN_BITS = 2
MAX_BITS = 32


@dataclass(frozen=True)
class QuantSpec:
    """Signed ``bits``-wide codes; real value = code * 2**exponent."""

    bits: int
    exponent: int

    def __post_init__(self) -> None:
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")

    @property
    def scale(self) -> float:
        return math.ldexp(1.0, self.exponent)

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def max_value(self) -> float:
        return self.qmax * self.scale

    @classmethod
    def from_scale(cls, bits: int, scale: float) -> QuantSpec:
        mantissa, exp = math.frexp(scale)
        if scale <= 0 or mantissa != 0.5:
            raise ValueError(f"scale must be a positive power of two, got {scale}")
        return cls(bits, exp - 1)


@dataclass
class QTensor:
    codes: np.ndarray
    spec: QuantSpec
    saturated: int = 0

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.size and (
            self.codes.min() < self.spec.qmin or self.codes.max() > self.spec.qmax
        ):
            raise ValueError("codes outside the signed range of the spec")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def fit_exponent(max_abs: float, bits: int) -> int:
    """Smallest exponent e with max_abs / 2**e <= 2**(bits-1) - 1."""
    qmax = (1 << (bits - 1)) - 1
    if not max_abs > 0 or not math.isfinite(max_abs):
        return 0
    e = math.ceil(math.log2(max_abs / qmax))
    # log2 can be off by one ulp around exact powers of two
    while max_abs > qmax * math.ldexp(1.0, e):
        e += 1
    while max_abs <= qmax * math.ldexp(1.0, e - 1):
        e -= 1
    return e


def fit_spec(values: np.ndarray, bits: int) -> QuantSpec:
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("cannot fit a quantization spec to an empty tensor")
    return QuantSpec(bits, fit_exponent(float(np.max(np.abs(values))), bits))


def quantize(values: np.ndarray, spec: QuantSpec) -> QTensor:
    """Round half to even onto the code grid, clamping to the signed range."""
    scaled = np.rint(np.asarray(values, dtype=np.float64) / spec.scale)
    saturated = int(np.count_nonzero((scaled < spec.qmin) | (scaled > spec.qmax)))
    codes = np.clip(scaled, spec.qmin, spec.qmax).astype(np.int64)
    return QTensor(codes, spec, saturated)


def dequantize(q: QTensor) -> np.ndarray:
    return q.codes.astype(np.float64) * q.spec.scale


def fake_quant(values: np.ndarray, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(values, spec))


def fake_quant_with_mask(
    values: np.ndarray, spec: QuantSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Fake-quantized values plus the straight-through gradient mask.

    The mask is 1 where the value lies inside the representable range and 0
    where it was clamped; backward passes multiply incoming gradients by it.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = spec.qmin * spec.scale, spec.qmax * spec.scale
    mask = ((values >= lo) & (values <= hi)).astype(np.float64)
    return fake_quant(values, spec), mask


def fake_quant_grad(values: np.ndarray, spec: QuantSpec, grad: np.ndarray) -> np.ndarray:
    return grad * fake_quant_with_mask(values, spec)[1]


def rounding_shift(x: np.ndarray, shift: int) -> np.ndarray:
    """Integer ``x * 2**-shift`` with round-half-to-even (left shift if negative)."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << (-shift)
    floor = x >> shift
    rem = x - (floor << shift)
    half = 1 << (shift - 1)
    up = (rem > half) | ((rem == half) & ((floor & 1) == 1))
    return floor + up.astype(np.int64)
