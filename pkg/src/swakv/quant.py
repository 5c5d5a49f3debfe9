"""Channel-wise asymmetric affine quantization of KV vectors.

Each contiguous group of ``channel_size`` elements gets its own scale and
zero point. Codes are unsigned ``bits``-bit integers and dequantize as
``scale * (code - zero_point)``. The zero point is an integer but is not
confined to the code range, so groups that do not straddle zero (all
positive, all negative) still use the full code range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from swakv.mathops import ContractViolation

SCALE_FLOOR = 1e-12
SUPPORTED_BITS = (4, 8)


@dataclass(frozen=True)
class QuantizedVector:
    codes: np.ndarray  # uint8, one code per element
    scale: np.ndarray  # float64, one per channel group
    zero_point: np.ndarray  # integer-valued float64, one per channel group
    bits: int
    channel_size: int

    def __post_init__(self):
        if np.any(self.scale <= 0):
            raise ContractViolation("quantization scale must be positive")
        if self.codes.size and int(self.codes.max()) > (1 << self.bits) - 1:
            raise ContractViolation("quantization code out of range")

    @property
    def nbytes(self) -> int:
        """Storage for the codes alone; per-group scale/zero metadata is not counted."""
        return (self.codes.size * self.bits + 7) // 8


def _groups(x: np.ndarray, channel_size: int) -> np.ndarray:
    if channel_size < 1 or x.size % channel_size:
        raise ContractViolation(
            f"channel_size {channel_size} does not divide vector length {x.size}"
        )
    return x.reshape(-1, channel_size)


def quantize(x, bits: int = 8, channel_size: int | None = None) -> QuantizedVector:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractViolation("cannot quantize an empty vector")
    if bits not in SUPPORTED_BITS:
        raise ContractViolation(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    channel_size = x.size if channel_size is None else channel_size
    g = _groups(x, channel_size)
    qmax = (1 << bits) - 1
    lo = g.min(axis=1)
    hi = g.max(axis=1)
    span = hi - lo
    # constant groups: one code step equals the value itself so it round-trips exactly
    scale = np.where(span > 0, span / qmax, np.abs(lo))
    scale = np.maximum(scale, SCALE_FLOOR)
    zero = np.round(-lo / scale) + 0.0
    codes = np.clip(np.round(g / scale[:, None] + zero[:, None]), 0, qmax)
    return QuantizedVector(
        codes=codes.astype(np.uint8).ravel(),
        scale=scale,
        zero_point=zero,
        bits=bits,
        channel_size=channel_size,
    )


def dequantize(q: QuantizedVector) -> np.ndarray:
    codes = q.codes.astype(np.float64).reshape(-1, q.channel_size)
    return (q.scale[:, None] * (codes - q.zero_point[:, None])).ravel()


def fake_quantize(x, bits: int = 8, channel_size: int | None = None) -> np.ndarray:
    """Round-trip ``x`` through storage precision, keeping its shape."""
    x = np.asarray(x, dtype=np.float64)
    return dequantize(quantize(x.ravel(), bits, channel_size)).reshape(x.shape)
