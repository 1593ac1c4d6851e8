"""Analytic cost model for FP8 casting overhead versus matmul savings.

Three cost atoms build every estimate here:

* casting a tensor to FP8 is memory-bound: elements x bytes/element over
  memory bandwidth (the 17-byte figure covers the amax scan plus the
  rescale-and-cast pass), and it dispatches two kernels;
* a matrix product is compute-bound: 2mnd flops over the path's
  throughput, one kernel;
* every dispatched kernel pays a fixed overhead `op_overhead_s` for
  launch latency and synchronization.

Casting work grows with the square of the matrix side while product work
grows with the cube, so halving matmul time by switching to FP8 only pays
off once the matrices are large enough to amortize the casting collar and
the extra dispatches. `find_crossover` locates that break-even side for a
square product. For adapter training the same accounting explains why
explicit low-rank paths lose throughput at small rank: each step casts
three extra small tensors and runs two extra skinny products whose
dispatch cost dwarfs their flops. Melding the adapter rows into the
weight codes removes exactly those per-step casts.

Weights are treated as cast once up front and amortized to zero per step;
only tensors produced fresh each step (activations, adapter factors and
their activation, gradients) are charged. Zero-element tensors and
zero-dim products are skipped: a kernel nobody launches costs nothing.

Two views, two conventions: the predictors (`predict_times`,
`speedup_curve`, `find_crossover`) model kernel plans whose dispatch
counts are known analytically, so they include the per-kernel charge.
`render_breakdown` prices measured counters, which record casting work
and flops but not product dispatch counts, so it renders the pure
bytes-and-flops roofline.

All constants are calibration, not measurement: defaults are chosen so a
square FP8 product first beats its binary16 peer at side 4096. Modeled
times are for comparing paths under one convention; they are not
wall-clock claims.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .ops import QUANTIZE_BYTES_PER_ELEM, PHASES

PATHS = ("fp16", "fp8_plain", "fp8_lora_explicit", "fp8_melded")

# Measured full-FP8 pretraining speedup commonly quoted for current
# accelerator stacks. Exposed so plots of speedup_curve output can draw a
# reference line; the model never targets it.
FP8_PRETRAIN_REFERENCE_SPEEDUP = 1.38

# Variant names used by training runs, mapped to cost-model paths.
_VARIANT_PATHS = {
    "melded": "fp8_melded",
    "explicit_fp8": "fp8_lora_explicit",
    "explicit_full": "fp16",
}

CSV_HEADER = "phase,path,quantize_ms,matmul_ms,quantize_ops,flops"


@dataclass(frozen=True)
class CostParams:
    """Hardware calibration constants for the cost model.

    Defaults describe a nominal accelerator with 1 TB/s of memory
    bandwidth and FP8 matmul at twice binary16 throughput. The binary16
    throughput and the per-kernel dispatch charge are calibrated jointly
    so that the square-product break-even lands at side 4096.
    """

    mem_bandwidth: float = 1e12
    fp16_throughput: float = 1.0026e14
    fp8_throughput: float | None = None
    quantize_bytes_per_elem: float = float(QUANTIZE_BYTES_PER_ELEM)
    op_overhead_s: float = 2e-4

    def __post_init__(self):
        if self.fp8_throughput is None:
            object.__setattr__(self, "fp8_throughput", 2.0 * self.fp16_throughput)
        for name in ("mem_bandwidth", "fp16_throughput", "fp8_throughput",
                     "quantize_bytes_per_elem"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.op_overhead_s < 0:
            raise ValueError("op_overhead_s must be nonnegative")
        if self.fp8_throughput < self.fp16_throughput:
            raise ValueError("fp8_throughput must be at least fp16_throughput")


def _cast_time(elements: int, params: CostParams) -> float:
    """One fresh-tensor cast: amax scan + rescale pass, two dispatches."""
    if elements <= 0:
        return 0.0
    return (elements * params.quantize_bytes_per_elem / params.mem_bandwidth
            + 2.0 * params.op_overhead_s)


def _product_time(flop_dims: int, throughput: float, params: CostParams) -> float:
    """One product with `flop_dims` = m*n*d; 2 flops per dim triple."""
    if flop_dims <= 0:
        return 0.0
    return 2.0 * flop_dims / throughput + params.op_overhead_s


def _check_dims(mnd) -> tuple[int, int, int]:
    m, n, d = mnd
    if m <= 0 or n <= 0 or d <= 0:
        raise ValueError(f"dims must be positive, got {mnd}")
    return int(m), int(n), int(d)


def predict_times(mnd, params: CostParams, path: str, r: int = 0) -> dict:
    """Modeled forward-pass times for one layer, split by cost kind.

    Returns {"quantize_time", "matmul_time"} in seconds for an m x n
    weight applied to an n x d input. Weights count as pre-cast; the
    paths differ in which fresh tensors they cast and which products
    they run:

    * fp16: the dense product, nothing cast.
    * fp8_plain: cast the input, one FP8 product.
    * fp8_lora_explicit: cast input, both adapter factors, and the
      adapter activation; run the dense product plus the two rank-r
      products.
    * fp8_melded: cast the input only; one FP8 product over the m+r
      merged rows.

    At r = 0 the adapter paths collapse onto fp8_plain.
    """
    m, n, d = _check_dims(mnd)
    if path not in PATHS:
        raise ValueError(f"unknown path {path!r}")
    if r < 0:
        raise ValueError("rank must be nonnegative")
    p = params
    if path == "fp16":
        return {"quantize_time": 0.0,
                "matmul_time": _product_time(m * n * d, p.fp16_throughput, p)}
    if path == "fp8_plain":
        return {"quantize_time": _cast_time(n * d, p),
                "matmul_time": _product_time(m * n * d, p.fp8_throughput, p)}
    if path == "fp8_lora_explicit":
        qt = (_cast_time(n * d, p) + _cast_time(r * n, p)
              + _cast_time(m * r, p) + _cast_time(r * d, p))
        mt = (_product_time(m * n * d, p.fp8_throughput, p)
              + _product_time(r * n * d, p.fp8_throughput, p)
              + _product_time(m * r * d, p.fp8_throughput, p))
        return {"quantize_time": qt, "matmul_time": mt}
    qt = _cast_time(n * d, p)
    mt = _product_time((m + r) * n * d, p.fp8_throughput, p)
    return {"quantize_time": qt, "matmul_time": mt}


def total_time(mnd, params: CostParams, path: str, r: int = 0) -> float:
    t = predict_times(mnd, params, path, r=r)
    return t["quantize_time"] + t["matmul_time"]


def find_crossover(params: CostParams | None = None, hi: int = 1 << 22) -> int:
    """Smallest square side n where the FP8 product beats binary16.

    The FP8 side saves n^3/fp16_throughput in product time (at double
    throughput) but pays the input cast plus one extra dispatch pair, so
    the margin grows cubically versus a quadratic collar: one sign
    change. Raises if FP8 has no throughput advantage (no crossover
    exists) or none is found below `hi`.
    """
    p = params if params is not None else CostParams()
    if p.fp8_throughput <= p.fp16_throughput:
        raise ValueError("no crossover: fp8 path has no throughput advantage")

    def fp8_wins(n: int) -> bool:
        dims = (n, n, n)
        return total_time(dims, p, "fp8_plain") < total_time(dims, p, "fp16")

    if not fp8_wins(hi):
        raise ValueError(f"no crossover found below {hi}")
    lo = 1
    # The win margin has a single sign change in n, so bisection applies.
    while lo < hi:
        mid = (lo + hi) // 2
        if fp8_wins(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def _step_times(r: int, dims, params: CostParams) -> tuple[float, float]:
    """Modeled binary16 and FP8 times for one explicit-adapter step.

    One training step on an m x n layer with batch d runs eight
    products: forward W x, A x, B (A x); backward W^T g, B^T g,
    A^T (B^T g), g (A x)^T, (B^T g) x^T. The binary16 arm runs them all
    at binary16 throughput with nothing cast. The FP8 arm runs them at
    FP8 throughput and casts the five fresh tensors of the step: the
    input, both adapter factors, the adapter activation, and the output
    gradient.
    """
    m, n, d = _check_dims(dims)
    p = params
    products = (m * n * d, r * n * d, m * r * d,
                n * m * d, r * m * d, n * r * d, m * d * r, r * d * n)
    fp16 = sum(_product_time(f, p.fp16_throughput, p) for f in products)
    fp8 = sum(_product_time(f, p.fp8_throughput, p) for f in products)
    for elems in (n * d, r * n, m * r, r * d, m * d):
        fp8 += _cast_time(elems, p)
    return fp16, fp8


def speedup_curve(ranks, dims=(4096, 4096, 2048),
                  params: CostParams | None = None) -> list:
    """Predicted FP8/binary16 step-throughput ratio per adapter rank.

    Returns [(rank, ratio), ...] where ratio > 1 means the FP8 path is
    faster. At small ranks the fixed casting collar and extra dispatches
    dominate the halved product time, so the ratio sits well below 1;
    it rises monotonically with rank as product flops take over.
    """
    p = params if params is not None else CostParams()
    ranks = [int(r) for r in ranks]
    if not ranks or any(r <= 0 for r in ranks):
        raise ValueError("ranks must be positive")
    out = []
    for r in ranks:
        fp16, fp8 = _step_times(r, dims, p)
        out.append((r, fp16 / fp8))
    return out


def render_breakdown(report, params: CostParams | None = None) -> str:
    """Price a run's measured counters into a per-phase cost CSV.

    Rows follow `CSV_HEADER`: for each phase, the casting and product
    work the run actually recorded, priced at the pure roofline (bytes
    over bandwidth, flops over the path's throughput) and reported in
    milliseconds alongside the raw counts. Counters do not record
    product dispatch counts, so no per-kernel charge appears here.
    Raises ValueError if the report lacks counters for any phase.
    """
    p = params if params is not None else CostParams()
    config = report.config if hasattr(report, "config") else report["config"]
    counters = report.counters if hasattr(report, "counters") else report["counters"]
    variant = config["variant"]
    if variant not in _VARIANT_PATHS:
        raise ValueError(f"unknown variant {variant!r}")
    path = _VARIANT_PATHS[variant]
    throughput = p.fp16_throughput if path == "fp16" else p.fp8_throughput
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for phase in PHASES:
        if phase not in counters:
            raise ValueError(f"report missing counters for phase {phase!r}")
        c = counters[phase]
        quantize_ms = (c["quantize_elements"] * p.quantize_bytes_per_elem
                       / p.mem_bandwidth) * 1e3
        matmul_ms = (c["matmul_flops"] / throughput) * 1e3
        writer.writerow([phase, path, repr(quantize_ms), repr(matmul_ms),
                         c["quantize_ops"], c["matmul_flops"]])
    return buf.getvalue()


def parse_breakdown(text: str) -> list:
    """Inverse of render_breakdown: rows as dicts with typed fields."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER.split(","):
        raise ValueError(f"unexpected breakdown header: {reader.fieldnames}")
    rows = []
    for row in reader:
        rows.append({
            "phase": row["phase"],
            "path": row["path"],
            "quantize_ms": float(row["quantize_ms"]),
            "matmul_ms": float(row["matmul_ms"]),
            "quantize_ops": int(row["quantize_ops"]),
            "flops": int(row["flops"]),
        })
    return rows
