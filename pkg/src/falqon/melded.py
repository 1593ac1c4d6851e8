"""Quantized linear layer with the low-rank adapter melded into its codes.

Construction quantizes the backbone W once, factorizes the quantization
error W - DQ(W~) into B_hat @ A_hat with a truncated SVD, re-encodes A_hat
at the backbone's own scale, and stacks it under the weight codes:

    W_merged = [ W~ ; A~ ]   with one shared multiplier s_W.

B_hat is discarded: the B factor lives on only implicitly, as the sum of
updates later applied to the backbone rows. A forward pass therefore needs
a single input quantization and a single FP8 product; splitting the output
at row m yields the layer output O and the adapter activation O_A = A x,
which is cached because the B-gradient is dL_dO @ (A x)^T.

Updates accumulate in a binary64 buffer and only the k rows with the
largest absolute mass are folded into the backbone codes each step, in the
scaled domain, at the fixed s_W. Rows whose folded update rounds away on
the FP8 grid lose it (counted via saturation only when the grid range is
exceeded); unselected rows keep accumulating.

A full-precision variant (quantize=False) holds the merged matrix in
binary64 with an externally supplied A. It exists for degenerate
equivalence checks against the explicit-adapter oracle and skips every
quantization step.
"""

from __future__ import annotations

import numpy as np

from .fp8 import (
    E4M3,
    E5M2,
    QuantizedTensor,
    decode_array,
    dequantize_tensor,
    encode_array,
    quantize_tensor,
)
from .ops import OpCounters, concat_rows, fp8_matmul, matmul, split_rows, transpose_quantized
from .svd import factor_to_lora, truncated_svd

BUFFER_MODES = ("accumulate", "overwrite")


class MeldedLinear:
    """State of one melded layer; build instances with init_melded."""

    def __init__(self, m: int, n: int, r: int, k: int,
                 w_merged: QuantizedTensor | None,
                 w_merged_raw: np.ndarray | None,
                 a_full: np.ndarray):
        self.m = m
        self.n = n
        self.r = r
        self.k = k
        self.w_merged = w_merged
        self.w_merged_raw = w_merged_raw
        self.a_full = a_full
        self.delta_buffer = np.zeros((m, r))
        self.saturation_events = 0
        self._saved_oa: np.ndarray | None = None

    @property
    def quantized(self) -> bool:
        return self.w_merged is not None

    @property
    def scale(self) -> float:
        return self.w_merged.scale if self.quantized else 1.0

    def backbone_matrix(self) -> np.ndarray:
        """Current effective backbone in real units (dequantized top rows)."""
        if self.quantized:
            top = QuantizedTensor(self.w_merged.codes[:self.m],
                                  self.w_merged.scale, self.w_merged.fmt)
            return dequantize_tensor(top)
        return self.w_merged_raw[:self.m].copy()

    def adapter_matrix(self) -> np.ndarray:
        """Adapter rows as the forward pass sees them (dequantized)."""
        if self.quantized:
            bottom = QuantizedTensor(self.w_merged.codes[self.m:],
                                     self.w_merged.scale, self.w_merged.fmt)
            return dequantize_tensor(bottom)
        return self.w_merged_raw[self.m:].copy()

    def forward(self, x: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
        """One merged product; caches O_A for the next backward."""
        if self._saved_oa is not None:
            raise RuntimeError("forward called twice without backward")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.n:
            raise ValueError(f"input must be {self.n} x d, got {x.shape}")
        if self.quantized:
            xq = quantize_tensor(x, E4M3, counters=counters)
            o_merged = fp8_matmul(self.w_merged, xq, counters=counters)
        else:
            o_merged = matmul(self.w_merged_raw, x)
            if counters is not None:
                counters.record_matmul(self.m + self.r, self.n, x.shape[1])
        out, oa = split_rows(o_merged, self.m)
        self._saved_oa = oa
        return out

    def backward(self, dl_do: np.ndarray,
                 counters: OpCounters | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Gradients (dL_dB, dL_dx) from the cached adapter activation.

        dL_dB = dL_dO @ (A x)^T reuses the cached O_A and stays binary64.
        dL_dx flows through the backbone codes: the upstream gradient is
        quantized to E5M2 and multiplied against the transposed E4M3
        weight block with both scales divided out.
        """
        if self._saved_oa is None:
            raise RuntimeError("backward called before forward")
        dl_do = np.asarray(dl_do, dtype=np.float64)
        d = self._saved_oa.shape[1]
        if dl_do.shape != (self.m, d):
            raise ValueError(
                f"gradient must be {self.m} x {d}, got {dl_do.shape}")
        dl_db = matmul(dl_do, np.ascontiguousarray(self._saved_oa.T))
        if counters is not None:
            counters.record_matmul(self.m, d, self.r)
        if self.quantized:
            gq = quantize_tensor(dl_do, E5M2, counters=counters)
            w_top = QuantizedTensor(self.w_merged.codes[:self.m],
                                    self.w_merged.scale, self.w_merged.fmt)
            dl_dx = fp8_matmul(transpose_quantized(w_top), gq, counters=counters)
        else:
            dl_dx = matmul(np.ascontiguousarray(self.w_merged_raw[:self.m].T), dl_do)
            if counters is not None:
                counters.record_matmul(self.n, self.m, d)
        self._saved_oa = None
        return dl_db, dl_dx

    def apply_update(self, delta_b: np.ndarray,
                     mode: str = "accumulate") -> np.ndarray:
        """Fold the k highest-mass buffered rows into the backbone codes.

        Returns the applied row indices in ascending order. Row scores are
        sums of absolute buffered entries; ties select the lower index.
        Applied rows are re-encoded at the fixed s_W (overflow saturates
        and is counted) and their buffer rows reset to zero.
        """
        if mode not in BUFFER_MODES:
            raise ValueError(f"unknown buffer mode {mode!r}")
        delta_b = np.asarray(delta_b, dtype=np.float64)
        if delta_b.shape != (self.m, self.r):
            raise ValueError(
                f"delta must be {self.m} x {self.r}, got {delta_b.shape}")
        if not np.isfinite(delta_b).all():
            raise ValueError("delta contains NaN or infinite entries")
        if mode == "accumulate":
            self.delta_buffer += delta_b
        else:
            self.delta_buffer[:] = delta_b
        scores = np.abs(self.delta_buffer).sum(axis=1)
        chosen = np.sort(np.argsort(-scores, kind="stable")[:self.k])
        row_updates = matmul(self.delta_buffer[chosen], self.a_full)
        if self.quantized:
            codes = self.w_merged.codes
            decoded = decode_array(codes[chosen], E4M3)
            new_codes, nsat = encode_array(
                decoded + self.w_merged.scale * row_updates, E4M3)
            codes[chosen] = new_codes
            self.saturation_events += nsat
        else:
            self.w_merged_raw[chosen] += row_updates
        self.delta_buffer[chosen] = 0.0
        return chosen


def init_melded(w: np.ndarray, r: int, k: int, *,
                quantize: bool = True,
                a_init: np.ndarray | None = None) -> MeldedLinear:
    """Build a melded layer from a pretrained backbone.

    With quantization on, the adapter directions come from the rank-r SVD
    of the backbone's own quantization error, so DQ(W~) + B_hat @ A_hat
    approximates W; only A_hat is kept (re-encoded at s_W as extra rows).
    With quantization off the caller must supply the adapter matrix, since
    a zero quantization error carries no directions.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("backbone must be a 2-D matrix")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} not in [1, {min(m, n)}]")
    if not 1 <= k <= m:
        raise ValueError(f"top-k {k} not in [1, {m}]")
    if quantize:
        if a_init is not None:
            raise ValueError("a_init is only for the full-precision variant")
        wq = quantize_tensor(w, E4M3)
        delta_w = w - dequantize_tensor(wq)
        a_hat = factor_to_lora(truncated_svd(delta_w, r))[1]
        a_codes, _ = encode_array(a_hat * wq.scale, E4M3)
        merged = concat_rows(wq, QuantizedTensor(a_codes, wq.scale, E4M3))
        return MeldedLinear(m, n, r, k, merged, None, a_hat)
    if a_init is None:
        raise ValueError("the full-precision variant requires a_init")
    a_init = np.asarray(a_init, dtype=np.float64)
    if a_init.shape != (r, n):
        raise ValueError(f"a_init must be {r} x {n}, got {a_init.shape}")
    raw = np.vstack([w, a_init])
    return MeldedLinear(m, n, r, k, None, raw, a_init.copy())
