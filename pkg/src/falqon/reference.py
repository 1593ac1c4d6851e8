"""Explicit low-rank adapter layer kept around as the slow reference.

The layer holds W, A, B as separate matrices and computes

    O = W x + B (A x)

either entirely in binary64 (full_precision mode) or with every operand
pushed through FP8 (fp8_explicit mode). The FP8 mode is deliberately
naive: it quantizes x, A, B and the intermediate A x independently every
forward pass, four per-tensor quantizations against the melded layer's
one. That gap is the point of the comparison, so do not cache or hoist
the weight quantizations here.

Gradients are always the exact binary64 chain-rule products of the
full-precision matrices:

    dL_dA = B^T dL_dO x^T
    dL_dB = dL_dO x^T A^T
    dL_dx = W^T dL_dO + A^T B^T dL_dO

except that in fp8_explicit mode the backbone part of dL_dx flows through
the stored weight codes with an E5M2-quantized upstream gradient, mirroring
the melded backward so op counts stay comparable.
"""

from __future__ import annotations

import numpy as np

from .fp8 import E4M3, E5M2, QuantizedTensor, dequantize_tensor, quantize_tensor
from .ops import OpCounters, fp8_matmul, matmul, transpose_quantized
from .svd import factor_to_lora, truncated_svd

MODES = ("full_precision", "fp8_explicit")


class ExplicitLoraLayer:
    """W, A, B held separately; build instances with init_explicit."""

    def __init__(self, w: np.ndarray, a: np.ndarray, b: np.ndarray, mode: str):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.w = np.asarray(w, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.m, self.n = self.w.shape
        self.r = self.a.shape[0]
        if self.a.shape != (self.r, self.n):
            raise ValueError("A must be r x n")
        if self.b.shape != (self.m, self.r):
            raise ValueError("B must be m x r")
        self.wq: QuantizedTensor | None = None
        if mode == "fp8_explicit":
            self.wq = quantize_tensor(self.w, E4M3)
        self._saved_x: np.ndarray | None = None

    def backbone_matrix(self) -> np.ndarray:
        """Backbone as the forward pass sees it."""
        if self.mode == "fp8_explicit":
            return dequantize_tensor(self.wq)
        return self.w.copy()

    def forward(self, x: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.n:
            raise ValueError(f"input must be {self.n} x d, got {x.shape}")
        self._saved_x = x
        d = x.shape[1]
        if self.mode == "full_precision":
            out = matmul(self.w, x) + matmul(self.b, matmul(self.a, x))
            if counters is not None:
                counters.record_matmul(self.m, self.n, d)
                counters.record_matmul(self.r, self.n, d)
                counters.record_matmul(self.m, self.r, d)
            return out
        xq = quantize_tensor(x, E4M3, counters=counters)
        aq = quantize_tensor(self.a, E4M3, counters=counters)
        bq = quantize_tensor(self.b, E4M3, counters=counters)
        o_a = fp8_matmul(aq, xq, counters=counters)
        oaq = quantize_tensor(o_a, E4M3, counters=counters)
        return fp8_matmul(self.wq, xq, counters=counters) + \
            fp8_matmul(bq, oaq, counters=counters)

    def backward(self, dl_do: np.ndarray, x: np.ndarray | None = None,
                 counters: OpCounters | None = None
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact chain-rule gradients (dL_dA, dL_dB, dL_dx).

        Uses the input cached by the last forward unless x overrides it.
        """
        if x is None:
            x = self._saved_x
        if x is None:
            raise RuntimeError("backward needs a cached or explicit input")
        x = np.asarray(x, dtype=np.float64)
        dl_do = np.asarray(dl_do, dtype=np.float64)
        d = x.shape[1]
        if dl_do.shape != (self.m, d):
            raise ValueError(
                f"gradient must be {self.m} x {d}, got {dl_do.shape}")
        g_xt = matmul(dl_do, np.ascontiguousarray(x.T))
        dl_da = matmul(np.ascontiguousarray(self.b.T), g_xt)
        dl_db = matmul(g_xt, np.ascontiguousarray(self.a.T))
        if counters is not None:
            counters.record_matmul(self.m, d, self.n)
            counters.record_matmul(self.r, self.m, self.n)
            counters.record_matmul(self.m, self.n, self.r)
        adapter_part = matmul(
            np.ascontiguousarray(self.a.T),
            matmul(np.ascontiguousarray(self.b.T), dl_do))
        if self.mode == "fp8_explicit":
            gq = quantize_tensor(dl_do, E5M2, counters=counters)
            dl_dx = fp8_matmul(transpose_quantized(self.wq), gq,
                               counters=counters) + adapter_part
        else:
            dl_dx = matmul(np.ascontiguousarray(self.w.T), dl_do) + adapter_part
            if counters is not None:
                counters.record_matmul(self.n, self.m, d)
        if counters is not None:
            counters.record_matmul(self.r, self.m, d)
            counters.record_matmul(self.n, self.r, d)
        self._saved_x = None
        return dl_da, dl_db, dl_dx


def init_explicit(w: np.ndarray, r: int, mode: str = "full_precision",
                  a_init: np.ndarray | None = None,
                  b_init: np.ndarray | None = None) -> ExplicitLoraLayer:
    """Build an explicit-adapter layer.

    Defaults match the melded construction so the two can be compared on
    equal footing: A comes from the rank-r SVD of the backbone's
    quantization error and B starts at zero. Pass a_init/b_init to
    override either.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("backbone must be a 2-D matrix")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} not in [1, {min(m, n)}]")
    if a_init is None:
        delta_w = w - dequantize_tensor(quantize_tensor(w, E4M3))
        a_init = factor_to_lora(truncated_svd(delta_w, r))[1]
    else:
        a_init = np.asarray(a_init, dtype=np.float64)
    if b_init is None:
        b_init = np.zeros((m, r))
    else:
        b_init = np.asarray(b_init, dtype=np.float64)
    return ExplicitLoraLayer(w, a_init, b_init, mode)
