"""Deterministic dense kernels and instrumentation counters.

All matrix products go through one fixed-order binary64 kernel so that
results are reproducible bit-for-bit: each output element accumulates its
products in ascending-k order, exactly like a naive triple loop. The FP8
product decodes both operands, applies each operand's scale, and reuses
the same kernel, so splitting an output by rows is exactly equivalent to
multiplying the corresponding row blocks separately.

Counters model the memory traffic a real kernel would incur, not what the
emulator does internally:

* quantize: 17 bytes/element (8 read for the amax pass + 8 read + 1 write)
* dequantize: 9 bytes/element (1 read + 8 write)
* matmul: operands at their storage width (1 byte for FP8 codes, 8 for
  binary64) plus an 8-byte output write per element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .fp8 import QuantizedTensor, decode_array

QUANTIZE_BYTES_PER_ELEM = 17
DEQUANTIZE_BYTES_PER_ELEM = 9

PHASES = ("forward", "backward", "update")


@dataclass
class OpCounters:
    """Tallies for one training phase."""

    phase: str
    quantize_ops: int = 0
    quantize_elements: int = 0
    dequantize_elements: int = 0
    matmul_flops: int = 0
    bytes_moved: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    def record_quantize(self, elements: int) -> None:
        self.quantize_ops += 1
        self.quantize_elements += elements
        self.bytes_moved += QUANTIZE_BYTES_PER_ELEM * elements

    def record_dequantize(self, elements: int) -> None:
        self.dequantize_elements += elements
        self.bytes_moved += DEQUANTIZE_BYTES_PER_ELEM * elements

    def record_matmul(self, m: int, n: int, d: int,
                      left_itemsize: int = 8, right_itemsize: int = 8) -> None:
        self.matmul_flops += 2 * m * n * d
        self.bytes_moved += (m * n * left_itemsize + n * d * right_itemsize
                             + m * d * 8)

    def as_dict(self) -> dict:
        return {
            "quantize_ops": self.quantize_ops,
            "quantize_elements": self.quantize_elements,
            "dequantize_elements": self.dequantize_elements,
            "matmul_flops": self.matmul_flops,
            "bytes_moved": self.bytes_moved,
        }


@numba.njit(cache=True)
def _mm_kernel(a, b):  # pragma: no cover - exercised via matmul
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact-order binary64 product; bit-identical to a naive triple loop.

    The i-k-j loop accumulates every output element over ascending k, the
    same rounded-operation sequence per element as the i-j-k form, so SIMD
    across j cannot change results.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _mm_kernel(a, b)


def fp8_matmul(wq: QuantizedTensor, xq: QuantizedTensor,
               counters: OpCounters | None = None) -> np.ndarray:
    """Product of two scaled-FP8 tensors, rescaled back to real units.

    Each operand's codes decode to their exact values and each operand's
    own multiplier is divided out before the deterministic product, which
    makes the result identical to matmul(dequantize(wq), dequantize(xq))
    bit-for-bit. Counters model native FP8 reads (1 byte/element); the
    decode here is emulation detail, not modeled dequantize traffic.
    """
    if wq.cols != xq.rows:
        raise ValueError(
            f"inner dimensions differ: {wq.codes.shape} @ {xq.codes.shape}")
    w = decode_array(wq.codes, wq.fmt) / wq.scale
    x = decode_array(xq.codes, xq.fmt) / xq.scale
    out = matmul(w, x)
    if counters is not None:
        counters.record_matmul(wq.rows, wq.cols, xq.cols,
                               left_itemsize=1, right_itemsize=1)
    return out


def transpose_quantized(q: QuantizedTensor) -> QuantizedTensor:
    """Code-level transpose; scale and format carry over unchanged."""
    return QuantizedTensor(codes=np.ascontiguousarray(q.codes.T),
                           scale=q.scale, fmt=q.fmt)


def concat_rows(top: QuantizedTensor, bottom: QuantizedTensor) -> QuantizedTensor:
    """Stack two code blocks that share a format, scale, and width."""
    if top.fmt is not bottom.fmt:
        raise ValueError("cannot concat tensors with different formats")
    if top.scale != bottom.scale:
        raise ValueError("cannot concat tensors with different scales")
    if top.cols != bottom.cols:
        raise ValueError(
            f"column counts differ: {top.cols} vs {bottom.cols}")
    return QuantizedTensor(codes=np.vstack([top.codes, bottom.codes]),
                           scale=top.scale, fmt=top.fmt)


def split_rows(merged: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a matrix into its first m rows and the remainder.

    Both pieces must be nonempty; a split at 0 or at the full height is
    rejected because it would produce an empty block.
    """
    if merged.ndim != 2:
        raise ValueError("split_rows expects a 2-D matrix")
    if not 0 < m < merged.shape[0]:
        raise ValueError(
            f"split point {m} not interior to {merged.shape[0]} rows")
    return merged[:m], merged[m:]
