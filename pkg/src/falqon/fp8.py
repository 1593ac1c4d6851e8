"""FP8 number formats and per-tensor scaled quantization.

Two 8-bit floating formats are supported:

* ``E4M3``: 1 sign / 4 exponent / 3 mantissa bits, bias 7. The all-ones
  exponent is *not* reserved: only the two codes with exponent and mantissa
  all ones are NaN, there are no infinities, and the largest finite value
  is 448.
* ``E5M2``: 1 sign / 5 exponent / 2 mantissa bits, bias 15. IEEE-style
  specials: exponent all ones encodes +/-inf (mantissa 0) and NaN
  (mantissa nonzero). Largest finite value is 57344.

Conversions use round-to-nearest-even on the FP8 grid with saturation:
any magnitude beyond the largest finite value (including infinities) maps
to +/-max_finite rather than to a special code.

Per-tensor scaling stores a single binary64 multiplier ``scale`` chosen so
the tensor's largest magnitude lands on max_finite: codes ~= X * scale and
dequantization divides by it. ``compute_scale`` reports the reciprocal
ratio max(|X|)/max_finite, which is the factor a consumer divides by to
restore the original range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Fp8Format:
    """One 8-bit floating-point encoding, with exact decode tables."""

    def __init__(self, name: str, exponent_bits: int, mantissa_bits: int,
                 bias: int, ieee_specials: bool):
        self.name = name
        self.exponent_bits = exponent_bits
        self.mantissa_bits = mantissa_bits
        self.bias = bias
        self.ieee_specials = ieee_specials
        # Smallest normal exponent; exponent field 0 holds subnormals with
        # the same quantum as this binade.
        self.min_exp = 1 - bias
        self.decode_table = self._build_table()
        finite = self.decode_table[np.isfinite(self.decode_table)]
        self.max_finite = float(np.max(finite))
        # Canonical quiet NaN: exponent all ones, mantissa MSB set (E5M2)
        # or all ones (E4M3, where only that code is NaN).
        exp_all = ((1 << exponent_bits) - 1) << mantissa_bits
        if ieee_specials:
            self.nan_code = exp_all | (1 << (mantissa_bits - 1))
        else:
            self.nan_code = exp_all | ((1 << mantissa_bits) - 1)
        # Sorted nonnegative finite values and their codes, for exact
        # value -> code lookup after grid rounding.
        pos = [(v, c) for c, v in enumerate(self.decode_table[:128])
               if np.isfinite(v)]
        pos.sort()
        self._pos_values = np.array([v for v, _ in pos])
        self._pos_codes = np.array([c for _, c in pos], dtype=np.uint8)

    def _build_table(self) -> np.ndarray:
        eb, mb, bias = self.exponent_bits, self.mantissa_bits, self.bias
        emask = (1 << eb) - 1
        mmask = (1 << mb) - 1
        table = np.empty(256, dtype=np.float64)
        for code in range(256):
            sign = -1.0 if code & 0x80 else 1.0
            e = (code >> mb) & emask
            m = code & mmask
            if self.ieee_specials and e == emask:
                table[code] = sign * np.inf if m == 0 else np.nan
            elif not self.ieee_specials and e == emask and m == mmask:
                table[code] = np.nan
            elif e == 0:
                # subnormal: no implicit leading one
                table[code] = sign * m * 2.0 ** (1 - bias - mb)
            else:
                table[code] = sign * (1.0 + m / (1 << mb)) * 2.0 ** (e - bias)
        return table

    def __repr__(self) -> str:
        return f"Fp8Format({self.name})"


E4M3 = Fp8Format("e4m3", 4, 3, 7, ieee_specials=False)
E5M2 = Fp8Format("e5m2", 5, 2, 15, ieee_specials=True)

_FORMATS = {"e4m3": E4M3, "e5m2": E5M2}


def get_format(name: str) -> Fp8Format:
    try:
        return _FORMATS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown FP8 format {name!r}") from None


def decode_fp8(bits: int, fmt: Fp8Format) -> float:
    """Exact value of one code byte (may be NaN or, for E5M2, +/-inf)."""
    if not 0 <= bits <= 255:
        raise ValueError(f"FP8 code out of range: {bits}")
    return float(fmt.decode_table[bits])


def decode_array(codes: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    """Exact values of a uint8 code array (table lookup, no scaling)."""
    return fmt.decode_table[codes]


def encode_array(values: np.ndarray, fmt: Fp8Format) -> tuple[np.ndarray, int]:
    """Round an array onto the FP8 grid.

    Returns (codes, saturation_count) where the count is the number of
    elements whose rounded magnitude exceeded max_finite and was clamped.
    NaNs map to the format's canonical NaN code; infinities saturate.
    """
    v = np.asarray(values, dtype=np.float64)
    nan_mask = np.isnan(v)
    neg = np.signbit(v)
    a = np.abs(v)
    # Uniform grid within each binade: scale so grid spacing becomes 1,
    # round to integer (rint is round-half-even), scale back. All three
    # steps are exact in binary64 because the factors are powers of two
    # and the significands involved are tiny.
    _, bexp = np.frexp(a)
    q = np.maximum(bexp - 1, fmt.min_exp) - fmt.mantissa_bits
    q = q.astype(np.int32)
    with np.errstate(invalid="ignore", over="ignore"):
        mag = np.ldexp(np.rint(np.ldexp(a, -q)), q)
    sat = (mag > fmt.max_finite) & ~nan_mask
    mag = np.where(sat, fmt.max_finite, mag)
    mag = np.where(nan_mask, 0.0, mag)
    codes = fmt._pos_codes[np.searchsorted(fmt._pos_values, mag)]
    codes = np.where(neg, codes | 0x80, codes).astype(np.uint8)
    codes[nan_mask] = fmt.nan_code
    return codes, int(np.count_nonzero(sat))


def encode_fp8(value: float, fmt: Fp8Format) -> int:
    """Round one binary64 value onto the FP8 grid, returning the code byte."""
    codes, _ = encode_array(np.array([value]), fmt)
    return int(codes[0])


def _validated_amax(x: np.ndarray) -> float:
    if x.size == 0:
        raise ValueError("cannot scale an empty tensor")
    amax = float(np.max(np.abs(x)))
    if not np.isfinite(amax) or np.isnan(x).any():
        raise ValueError("tensor contains NaN or infinite entries")
    return amax


def compute_scale(x: np.ndarray, fmt: Fp8Format) -> float:
    """Per-tensor range ratio max(|X|) / max_finite; 1.0 for all-zero X."""
    x = np.asarray(x, dtype=np.float64)
    amax = _validated_amax(x)
    if amax == 0.0:
        return 1.0
    return amax / fmt.max_finite


@dataclass(frozen=True)
class QuantizedTensor:
    """FP8 codes plus the binary64 multiplier they were scaled by.

    codes ~= X * scale, so dequantization divides by ``scale``. Every
    decoded magnitude is <= max_finite / scale.
    """

    codes: np.ndarray
    scale: float
    fmt: Fp8Format = field(repr=False)

    def __post_init__(self):
        if self.codes.dtype != np.uint8 or self.codes.ndim != 2:
            raise ValueError("codes must be a 2-D uint8 array")

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]


def quantize_tensor(x: np.ndarray, fmt: Fp8Format,
                    counters=None) -> QuantizedTensor:
    """Scale X so its amax hits max_finite, then round onto the FP8 grid."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("quantize_tensor expects a 2-D matrix")
    amax = _validated_amax(x)
    scale = fmt.max_finite / amax if amax != 0.0 else 1.0
    codes, _ = encode_array(x * scale, fmt)
    if counters is not None:
        counters.record_quantize(x.size)
    return QuantizedTensor(codes=codes, scale=scale, fmt=fmt)


def dequantize_tensor(q: QuantizedTensor, counters=None) -> np.ndarray:
    """Exact decode of every code divided by the stored multiplier."""
    out = decode_array(q.codes, q.fmt) / q.scale
    if counters is not None:
        counters.record_dequantize(out.size)
    return out
