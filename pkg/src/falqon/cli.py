"""Command-line front end: train, compare, fp8-table, svd-check, overhead.

Exit codes are uniform across commands: 0 success, 1 for anything wrong
with flags or the run file (nothing is written in that case), 2 for a
numerical abort such as a run diverging to a non-finite loss. All
commands are deterministic given the run file and its seed; compare may
fan its three arms out to worker threads (capped by the FALQON_THREADS
environment variable) without changing any result.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .fp8 import E4M3, E5M2, decode_array
from .overhead import (
    FP8_PRETRAIN_REFERENCE_SPEEDUP,
    CostParams,
    find_crossover,
    render_breakdown,
    speedup_curve,
)
from .svd import truncated_svd
from .training import (
    TrainingDiverged,
    build_model,
    build_task,
    make_optimizer_states,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2

_FP8_FORMATS = {"e4m3": E4M3, "e5m2": E5M2}

DEFAULT_CURVE_RANKS = (16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; here every usage defect is exit 1."""

    def error(self, message):
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _fail(message: str) -> int:
    print(f"falqon: error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def _worker_cap() -> int:
    raw = os.environ.get("FALQON_THREADS", "")
    if not raw:
        return 3
    cap = int(raw)  # garbage here is a config error, surfaced by the caller
    if cap < 1:
        raise ValueError(f"FALQON_THREADS must be >= 1, got {cap}")
    return cap


def _run_one_arm(config, task):
    model = build_model(config)
    states = make_optimizer_states(model, config)
    report = train(model, config, task, optimizer_states=states)
    return model, states, report


def cmd_train(args) -> int:
    try:
        setup = load_config(args.config)
    except ValueError as exc:
        return _fail(str(exc))
    cfg = setup.train
    try:
        if setup.resume_from is not None:
            model, states = load_checkpoint(setup.resume_from, cfg)
            # the task couples to the run's step-0 model, which the config
            # fully determines; coupling to the checkpointed state would
            # move the targets off the uninterrupted run's
            task = build_task(cfg, build_model(cfg))
        else:
            model = build_model(cfg)
            states = make_optimizer_states(model, cfg)
            task = build_task(cfg, model)
    except (ValueError, OSError) as exc:
        return _fail(str(exc))
    try:
        report = train(model, cfg, task, optimizer_states=states)
    except TrainingDiverged as exc:
        print(f"falqon: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    setup.outputs.report.write_text(report.to_json() + "\n")
    written = [setup.outputs.report]
    if cfg.variant == "melded" and cfg.quantize:
        save_checkpoint(setup.outputs.checkpoint, model, states)
        written.append(setup.outputs.checkpoint)
    else:
        print("falqon: note: checkpoint skipped, only quantized melded "
              "runs produce a deployable artifact", file=sys.stderr)
    setup.outputs.breakdown.write_text(render_breakdown(report, setup.cost))
    written.append(setup.outputs.breakdown)

    if report.losses:
        print(f"steps={len(report.losses)} initial_loss={report.losses[0]:.6g} "
              f"final_loss={report.losses[-1]:.6g} "
              f"saturation_events={report.saturation_events}")
    else:
        print("steps=0 (empty report)")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _compare_document(reports: dict, cost: CostParams) -> str:
    lines = []
    for name in ("melded", "explicit_fp8", "explicit_full"):
        report = reports[name]
        lines.append(f"[{name}]")
        lines.append("step,loss")
        start = report.config["start_step"]
        for i, loss in enumerate(report.losses):
            lines.append(f"{start + i},{loss!r}")
        lines.append(render_breakdown(report, cost).rstrip("\n"))
        lines.append("")
    melded_ops = sum(c["quantize_ops"]
                     for c in reports["melded"].counters.values())
    explicit_ops = sum(c["quantize_ops"]
                       for c in reports["explicit_fp8"].counters.values())
    ratio = melded_ops / explicit_ops if explicit_ops else float("nan")
    lines.append(f"summary: melded_quantize_ops={melded_ops} "
                 f"explicit_quantize_ops={explicit_ops} ratio={ratio:.4f}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    try:
        setup = load_config(args.config)
        workers = _worker_cap()
    except ValueError as exc:
        return _fail(str(exc))
    base = setup.train
    try:
        # the shared task couples to the melded arm's starting model
        melded_cfg = dataclasses.replace(base, variant="melded")
        task = build_task(melded_cfg, build_model(melded_cfg))
        arms = {
            "melded": melded_cfg,
            "explicit_fp8": dataclasses.replace(base, variant="explicit_fp8"),
            "explicit_full": dataclasses.replace(base, variant="explicit_full"),
        }
        with ThreadPoolExecutor(max_workers=min(workers, len(arms))) as pool:
            futures = {name: pool.submit(_run_one_arm, cfg, task)
                       for name, cfg in arms.items()}
            reports = {name: fut.result()[2] for name, fut in futures.items()}
    except TrainingDiverged as exc:
        print(f"falqon: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        return _fail(str(exc))
    document = _compare_document(reports, setup.cost)
    setup.outputs.compare.write_text(document)
    print(document, end="")
    print(f"wrote {setup.outputs.compare}", file=sys.stderr)
    return EXIT_OK


def cmd_fp8_table(args) -> int:
    fmt = _FP8_FORMATS[args.format]
    values = decode_array(np.arange(256, dtype=np.uint8).reshape(1, 256), fmt)
    print("bits,value")
    for code in range(256):
        print(f"0x{code:02x},{float(values[0, code])!r}")
    return EXIT_OK


def cmd_svd_check(args) -> int:
    m, n, r, seed = args.m, args.n, args.r, args.seed
    if m < 1 or n < 1 or r < 1 or r > min(m, n):
        return _fail(f"need 1 <= r <= min(m, n), got m={m} n={n} r={r}")
    w = np.random.default_rng(seed).standard_normal((m, n))
    svd = truncated_svd(w, r)
    residual_sq = float(np.linalg.norm(w - (svd.u * svd.s) @ svd.vt) ** 2)
    oracle = np.linalg.svd(w, compute_uv=False)
    trailing_mass = float(np.sum(oracle[r:] ** 2))
    denom = max(trailing_mass, np.finfo(float).tiny)
    gap = abs(residual_sq - trailing_mass) / denom
    status = "ok" if gap < 1e-8 else "mismatch"
    print(f"m={m} n={n} r={r} seed={seed}")
    print(f"residual_sq={residual_sq!r}")
    print(f"oracle_trailing_mass={trailing_mass!r}")
    print(f"relative_gap={gap:.3e} status={status}")
    return EXIT_OK if status == "ok" else EXIT_NUMERIC


def cmd_overhead(args) -> int:
    cost = CostParams()
    if args.params is not None:
        try:
            cost = load_config(args.params).cost
        except ValueError as exc:
            return _fail(str(exc))
    crossover = find_crossover(cost)
    print("rank,ratio,crossover")
    for rank, ratio in speedup_curve(DEFAULT_CURVE_RANKS, params=cost):
        print(f"{rank},{ratio:.4f},{crossover}")
    print(f"# reference full-fp8 pretraining speedup: "
          f"{FP8_PRETRAIN_REFERENCE_SPEEDUP}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="falqon",
                     description="FP8 melded-adapter training tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training arm")
    p_train.add_argument("-c", "--config", required=True)
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare",
                           help="train melded, explicit-FP8, and "
                                "full-precision arms side by side")
    p_cmp.add_argument("-c", "--config", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_tab = sub.add_parser("fp8-table", help="dump all 256 code values")
    p_tab.add_argument("--format", required=True, choices=sorted(_FP8_FORMATS))
    p_tab.set_defaults(func=cmd_fp8_table)

    p_svd = sub.add_parser("svd-check",
                           help="low-rank residual vs dense-SVD oracle")
    p_svd.add_argument("--m", type=int, required=True)
    p_svd.add_argument("--n", type=int, required=True)
    p_svd.add_argument("--r", type=int, required=True)
    p_svd.add_argument("--seed", type=int, default=0)
    p_svd.set_defaults(func=cmd_svd_check)

    p_ovh = sub.add_parser("overhead", help="speedup curve and crossover")
    p_ovh.add_argument("--params", default=None,
                       help="run file whose [cost] section calibrates the model")
    p_ovh.set_defaults(func=cmd_overhead)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValueError as exc:
        return _fail(str(exc))
    try:
        return args.func(args)
    except ValueError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
