"""Binary checkpoints: the melded model is its own deployment artifact.

A checkpoint stores exactly what a melded run needs to continue or to
serve: per layer, the merged FP8 codes with their one shared scale, the
full-precision adapter factor kept for gradient computation, the pending
row-update buffer, and the optimizer moments. Because the backbone is
already quantized, the saved codes are the deployable weights; nothing
needs a post-training conversion pass.

Layout, all little-endian, no padding or alignment:

    magic       8 bytes  b"FALQONCK"
    version     u32
    layer_count u32
    per layer:
        m, n, r, k    u32 each
        s_W           binary64
        merged codes  (m+r)*n raw bytes, row-major
        A_full        r*n binary64
        delta_buffer  m*r binary64
        moments       2*m*r binary64 (first moment, then second)
        format tag    u8

Loading then saving reproduces the file byte for byte: every field is a
bit-exact copy, never reinterpreted through text. A version other than
CHECKPOINT_VERSION is rejected, as is any magic mismatch, truncation, or
trailing data.

The optimizer step counter is not stored: it always equals the resume
step, which the run settings supply (batches are keyed by absolute step
index, so the two cannot diverge). Saturation tallies are per-run
diagnostics and live in run reports, not here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fp8 import E4M3, E5M2, QuantizedTensor
from .melded import MeldedLinear
from .training import OptimizerState, ToyModel, TrainConfig

CHECKPOINT_MAGIC = b"FALQONCK"
CHECKPOINT_VERSION = 1

_FORMAT_TAGS = {E4M3.name: 0, E5M2.name: 1}
_TAG_FORMATS = {0: E4M3, 1: E5M2}

_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_U8 = struct.Struct("B")


@dataclass
class LayerRecord:
    """One layer's persisted state, exactly as stored on disk."""

    m: int
    n: int
    r: int
    k: int
    s_w: float
    codes: np.ndarray
    a_full: np.ndarray
    delta_buffer: np.ndarray
    moment1: np.ndarray
    moment2: np.ndarray
    fmt_tag: int


def _layer_record(layer: MeldedLinear, state: OptimizerState) -> LayerRecord:
    if not layer.quantized:
        raise ValueError("only quantized melded layers can be checkpointed")
    m, n, r = layer.m, layer.n, layer.r
    codes = layer.w_merged.codes
    if codes.dtype != np.uint8 or codes.shape != (m + r, n):
        raise ValueError(f"merged codes must be uint8 ({m + r}, {n}), "
                         f"got {codes.dtype} {codes.shape}")
    if layer.a_full.shape != (r, n):
        raise ValueError(f"A factor must be ({r}, {n}), got {layer.a_full.shape}")
    if layer.delta_buffer.shape != (m, r):
        raise ValueError(f"update buffer must be ({m}, {r}), "
                         f"got {layer.delta_buffer.shape}")
    for name, mom in (("first", state.m), ("second", state.v)):
        if mom is None or mom.shape != (m, r):
            raise ValueError(f"{name} moment must be ({m}, {r})")
    fmt = layer.w_merged.fmt
    if fmt.name not in _FORMAT_TAGS:
        raise ValueError(f"unknown code format {fmt.name!r}")
    return LayerRecord(m, n, r, layer.k, layer.w_merged.scale, codes,
                       layer.a_full, layer.delta_buffer,
                       state.m, state.v, _FORMAT_TAGS[fmt.name])


def serialize(model: ToyModel, optimizer_states: list) -> bytes:
    """Model plus optimizer moments as one checkpoint byte string."""
    if len(optimizer_states) != len(model.layers):
        raise ValueError("one optimizer state per layer required")
    out = [CHECKPOINT_MAGIC,
           _U32.pack(CHECKPOINT_VERSION),
           _U32.pack(len(model.layers))]
    for layer, state in zip(model.layers, optimizer_states):
        rec = _layer_record(layer, state)
        out.append(_U32.pack(rec.m))
        out.append(_U32.pack(rec.n))
        out.append(_U32.pack(rec.r))
        out.append(_U32.pack(rec.k))
        out.append(_F64.pack(rec.s_w))
        out.append(np.ascontiguousarray(rec.codes).tobytes())
        out.append(np.ascontiguousarray(rec.a_full, dtype=np.float64).tobytes())
        out.append(np.ascontiguousarray(rec.delta_buffer,
                                        dtype=np.float64).tobytes())
        out.append(np.ascontiguousarray(rec.moment1, dtype=np.float64).tobytes())
        out.append(np.ascontiguousarray(rec.moment2, dtype=np.float64).tobytes())
        out.append(_U8.pack(rec.fmt_tag))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise ValueError("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f64(self) -> float:
        return _F64.unpack(self.take(8))[0]

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]

    def f64_block(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()


def deserialize(data: bytes) -> list:
    """Checkpoint bytes back into LayerRecords; strict about framing."""
    rd = _Reader(data)
    magic = rd.take(8)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint: bad magic {magic!r}")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}, "
                         f"expected {CHECKPOINT_VERSION}")
    layer_count = rd.u32()
    records = []
    for _ in range(layer_count):
        m, n, r, k = rd.u32(), rd.u32(), rd.u32(), rd.u32()
        if min(m, n, r) <= 0:
            raise ValueError(f"invalid layer dims m={m} n={n} r={r}")
        s_w = rd.f64()
        codes = np.frombuffer(rd.take((m + r) * n),
                              dtype=np.uint8).reshape(m + r, n).copy()
        a_full = rd.f64_block(r, n)
        delta_buffer = rd.f64_block(m, r)
        moment1 = rd.f64_block(m, r)
        moment2 = rd.f64_block(m, r)
        fmt_tag = rd.u8()
        if fmt_tag not in _TAG_FORMATS:
            raise ValueError(f"unknown format tag {fmt_tag}")
        records.append(LayerRecord(m, n, r, k, s_w, codes, a_full,
                                   delta_buffer, moment1, moment2, fmt_tag))
    if rd.pos != len(data):
        raise ValueError(f"{len(data) - rd.pos} trailing bytes after "
                         "the last layer")
    return records


def save_checkpoint(path, model: ToyModel, optimizer_states: list) -> None:
    Path(path).write_bytes(serialize(model, optimizer_states))


def load_checkpoint(path, config: TrainConfig) -> tuple:
    """Rebuild (model, optimizer_states) ready to resume at config.start_step.

    Layer shapes, codes, buffers, and moments come bit-exact from the
    file; optimizer hyperparameters and the step counter come from the
    run settings, whose start_step must match the number of steps the
    checkpointed run had completed.
    """
    records = deserialize(Path(path).read_bytes())
    layers = []
    states = []
    for rec in records:
        fmt = _TAG_FORMATS[rec.fmt_tag]
        merged = QuantizedTensor(codes=rec.codes, scale=rec.s_w, fmt=fmt)
        layer = MeldedLinear(rec.m, rec.n, rec.r, rec.k,
                             w_merged=merged, w_merged_raw=None,
                             a_full=rec.a_full)
        layer.delta_buffer = rec.delta_buffer
        layers.append(layer)
        state = OptimizerState.for_shape((rec.m, rec.r), config)
        state.step = config.start_step
        state.m = rec.moment1
        state.v = rec.moment2
        states.append(state)
    model = ToyModel(layers, activation=config.activation, loss=config.loss)
    return model, states
