"""Desk-scale training orchestration: toy models, losses, AdamW, run loop.

A ToyModel is a chain of melded or explicit-adapter layers with an
elementwise activation between (not after) layers and an analytic loss.
There is no autograd tape: each layer's backward is hand-derived and the
loop chains them in reverse, multiplying by the activation derivative at
every boundary.

Every random draw is keyed by (seed, stream, step) through a fresh
generator, so a run resumed at step s reproduces the exact batches of an
uninterrupted run, independent of history.

The default linear_teacher task is built to be realizable by a rank-r
adapter: the teacher equals the model's own quantized backbone plus a
gap lying in the span of the adapter rows, sized a few FP8 grid steps
above the backbone so that folded updates survive re-encoding, with label
noise near the grid-noise floor so quantized and full-precision training
bottom out at comparable losses. Backbones far from this regime train
poorly at fixed scale; the saturation counters make that visible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields

import numpy as np

from .fp8 import E4M3, dequantize_tensor, quantize_tensor
from .melded import BUFFER_MODES, MeldedLinear, init_melded
from .ops import OpCounters, PHASES
from .reference import ExplicitLoraLayer, init_explicit

ACTIVATIONS = ("identity", "relu", "gelu")
LOSSES = ("mse", "cross_entropy")
TASKS = ("linear_teacher", "classification_blobs")
VARIANTS = ("melded", "explicit_full", "explicit_fp8")

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass
class TrainConfig:
    """Run settings; the defaults form a working row-update regime.

    The defaults were sized together and move as a set. In-dim equals the
    adapter rank, so the adapter rows span the whole input space and any
    rounding the row re-encodes introduce stays correctable by later
    updates. Out-dim 512 against k=10 gives each row about 51 steps of
    buffer growth between applications, several code-grid steps per
    delivery, comfortably above the re-encode dead zone. backbone_std
    keeps the rescaled adapter rows inside the shared-scale code range
    (a handful of entries saturate, harmlessly). teacher_gap is ~3.5
    grid steps per weight: large enough that closing it dominates the
    loss, small enough to cross within 200 steps at lr=2e-4. label_noise
    puts both training paths on a comparable noise floor. batch=128
    keeps per-entry gradient sign agreement high, beta2=0.95 lets the
    step size track gradient decay instead of stale variance, and eps
    sits far below the tiny gradient magnitudes of this regime.
    """

    seed: int = 0
    steps: int = 200
    batch: int = 128
    rank: int = 64
    top_k: int = 10
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-13
    weight_decay: float = 0.0
    buffer_mode: str = "accumulate"
    dims: tuple = (64, 512)
    activation: str = "identity"
    loss: str = "mse"
    task: str = "linear_teacher"
    backbone_std: float = 4.5e-3
    teacher_gap: float = 9.84375e-4
    label_noise: float = 1.8e-3
    cluster_std: float = 0.1
    cluster_sep: float = 10.0
    variant: str = "melded"
    quantize: bool = True
    start_step: int = 0

    def validate(self) -> None:
        if self.steps < 0 or self.start_step < 0:
            raise ValueError("steps and start_step must be nonnegative")
        if self.batch < 1 or self.rank < 1 or self.top_k < 1:
            raise ValueError("batch, rank, and top_k must be positive")
        if self.lr < 0 or self.eps <= 0:
            raise ValueError("lr must be nonnegative, eps positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("betas must lie in [0, 1)")
        if self.buffer_mode not in BUFFER_MODES:
            raise ValueError(f"unknown buffer_mode {self.buffer_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ValueError("dims must chain at least two positive sizes")
        if self.backbone_std <= 0:
            raise ValueError("backbone_std must be positive")
        if self.label_noise < 0 or self.teacher_gap < 0:
            raise ValueError("noise and gap must be nonnegative")

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "dims" in kwargs:
            kwargs["dims"] = tuple(kwargs["dims"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class OptimizerState:
    """AdamW moments for one layer's B-gradient."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    @classmethod
    def for_shape(cls, shape, config: TrainConfig) -> "OptimizerState":
        return cls(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                   eps=config.eps, weight_decay=config.weight_decay,
                   m=np.zeros(shape), v=np.zeros(shape))


def optimizer_step(state: OptimizerState, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected AdamW step; returns the additive delta for B.

    Decoupled weight decay would pull the parameter toward zero, but the
    implicit B is re-based to zero after every application, so the decay
    term has no anchor and contributes nothing; it is kept only so a
    nonzero setting is an explicit no-op rather than a silent surprise.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match "
                         f"moments {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return -state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class ToyModel:
    layers: list
    activation: str = "identity"
    loss: str = "mse"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.m != nxt.n:
                raise ValueError(
                    f"layer dims do not chain: {prev.m} out vs {nxt.n} in")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    t = np.tanh(_GELU_C * (z + _GELU_A * z ** 3))
    return 0.5 * z * (1.0 + t)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    u = _GELU_C * (z + _GELU_A * z ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * \
        (1.0 + 3.0 * _GELU_A * z ** 2)


def loss_and_grad(out: np.ndarray, target: np.ndarray,
                  kind: str) -> tuple[float, np.ndarray]:
    """Analytic loss value and dL_dO for the model output."""
    m, d = out.shape
    if kind == "mse":
        diff = out - target
        return float(np.mean(diff ** 2)), 2.0 * diff / (m * d)
    # cross_entropy: rows are class logits, columns are batch items,
    # target holds integer labels per column
    labels = np.asarray(target).astype(np.int64).reshape(-1)
    if labels.shape[0] != d:
        raise ValueError("one label per batch column required")
    shifted = out - out.max(axis=0, keepdims=True)
    expo = np.exp(shifted)
    p = expo / expo.sum(axis=0, keepdims=True)
    nll = -np.mean(np.log(p[labels, np.arange(d)] + 1e-300))
    grad = p.copy()
    grad[labels, np.arange(d)] -= 1.0
    return float(nll), grad / d


@dataclass
class SyntheticTask:
    """Deterministic data source; draws are keyed by (seed, stream, step)."""

    kind: str
    in_dim: int
    out_dim: int
    seed: int
    teacher: np.ndarray | None = None
    noise: float = 0.0
    means: np.ndarray | None = None
    cluster_std: float = 0.1

    def sample(self, step: int, batch: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng((self.seed, 901, step))
        if self.kind == "linear_teacher":
            x = rng.standard_normal((self.in_dim, batch))
            y = self.teacher @ x
            if self.noise > 0:
                y = y + self.noise * rng.standard_normal(y.shape)
            return x, y
        labels = rng.integers(0, self.out_dim, size=batch)
        x = self.means[labels].T + self.cluster_std * rng.standard_normal(
            (self.in_dim, batch))
        return x, labels


def synthetic_dataset(task: str, seed: int, sizes: tuple[int, int], *,
                      noise: float = 0.0, teacher: np.ndarray | None = None,
                      cluster_std: float = 0.1,
                      cluster_sep: float = 10.0) -> SyntheticTask:
    """Build a deterministic dataset.

    linear_teacher regresses y = T x (+ noise); T defaults to a random
    draw inside the FP8-representable range but is overridable so a run
    can couple the teacher to a model's reachable set.
    classification_blobs places out_dim Gaussian clusters along scaled
    coordinate axes (separation = cluster_sep standard deviations) so a
    bias-free linear map can separate them.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    in_dim, out_dim = sizes
    if in_dim < 1 or out_dim < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng((seed, 900))
    if task == "linear_teacher":
        if teacher is None:
            teacher = rng.standard_normal((out_dim, in_dim))
        teacher = np.asarray(teacher, dtype=np.float64)
        if teacher.shape != (out_dim, in_dim):
            raise ValueError("teacher shape does not match sizes")
        return SyntheticTask("linear_teacher", in_dim, out_dim, seed,
                             teacher=teacher, noise=noise)
    if out_dim > in_dim:
        raise ValueError("blobs need in_dim >= number of classes")
    means = np.zeros((out_dim, in_dim))
    sep = cluster_sep * cluster_std
    for c in range(out_dim):
        means[c, c] = sep
    return SyntheticTask("classification_blobs", in_dim, out_dim, seed,
                         means=means, cluster_std=cluster_std)


def _layer_rank(config: TrainConfig, m: int, n: int) -> int:
    return min(config.rank, m, n)


def build_model(config: TrainConfig, variant: str | None = None) -> ToyModel:
    """Construct the layer chain for one training arm.

    All variants share the same backbone draws, keyed (seed, 902, layer),
    so melded, explicit-FP8, and full-precision arms start from the same
    weights. With quantize=False the adapter rows cannot come from a
    quantization error, so a shared random A keyed (seed, 905, layer) is
    used for both the melded and explicit arms.
    """
    config.validate()
    variant = config.variant if variant is None else variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    layers = []
    for idx in range(len(config.dims) - 1):
        n, m = config.dims[idx], config.dims[idx + 1]
        w = np.random.default_rng((config.seed, 902, idx)).standard_normal(
            (m, n)) * config.backbone_std
        r = _layer_rank(config, m, n)
        k = min(config.top_k, m)
        shared_a = None
        if not config.quantize:
            shared_a = np.random.default_rng(
                (config.seed, 905, idx)).standard_normal((r, n))
        if variant == "melded":
            if config.quantize:
                layers.append(init_melded(w, r, k))
            else:
                layers.append(init_melded(w, r, k, quantize=False,
                                          a_init=shared_a))
        elif variant == "explicit_full":
            layers.append(init_explicit(w, r, "full_precision",
                                        a_init=shared_a))
        else:
            layers.append(init_explicit(w, r, "fp8_explicit",
                                        a_init=shared_a))
    return ToyModel(layers, config.activation, config.loss)


def build_task(config: TrainConfig, model: ToyModel | None = None) -> SyntheticTask:
    """Dataset for a config; couples the default regression to the model.

    For a single-layer linear_teacher run the teacher is set to the
    model's starting backbone plus a gap in the adapter's row space,
    scaled so gap entries sit a few FP8 grid steps above zero. That makes
    the task realizable by every arm (they share A up to quantization)
    and is the regime where adapter fine-tuning is meaningful. Multi-layer
    or model-free runs fall back to a random teacher.
    """
    if config.task == "classification_blobs":
        return synthetic_dataset(
            "classification_blobs", config.seed,
            (config.dims[0], config.dims[-1]),
            cluster_std=config.cluster_std, cluster_sep=config.cluster_sep)
    sizes = (config.dims[0], config.dims[-1])
    if model is None or len(model.layers) != 1:
        return synthetic_dataset("linear_teacher", config.seed, sizes,
                                 noise=config.label_noise)
    layer = model.layers[0]
    if isinstance(layer, MeldedLinear):
        base = layer.backbone_matrix()
        a = layer.a_full
    else:
        base = dequantize_tensor(quantize_tensor(layer.w, E4M3)) \
            if layer.mode == "fp8_explicit" else layer.w.copy()
        a = layer.a
    rng = np.random.default_rng((config.seed, 903))
    # Sign mixture, not Gaussian: every adapter coefficient then sits at
    # the same magnitude, so no straggler tail lingers beyond the
    # optimizer's per-step movement budget within a short run.
    mix = np.sign(rng.standard_normal((layer.m, a.shape[0])))
    gap = mix @ a
    rms = float(np.sqrt(np.mean(gap ** 2)))
    if rms > 0 and config.teacher_gap > 0:
        gap = gap * (config.teacher_gap / rms)
    else:
        gap = np.zeros_like(gap)
    return synthetic_dataset("linear_teacher", config.seed, sizes,
                             noise=config.label_noise, teacher=base + gap)


@dataclass
class RunReport:
    config: dict
    losses: list
    counters: dict
    saturation_events: int
    wall_time_ms: float

    def to_json(self, include_wall_time: bool = True) -> str:
        body = {
            "config": self.config,
            "losses": self.losses,
            "counters": self.counters,
            "saturation_events": self.saturation_events,
        }
        if include_wall_time:
            body["wall_time_ms"] = self.wall_time_ms
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        return cls(d["config"], d["losses"], d["counters"],
                   d["saturation_events"], d.get("wall_time_ms", 0.0))


def make_optimizer_states(model: ToyModel, config: TrainConfig) -> list:
    return [OptimizerState.for_shape((layer.m, layer.r), config)
            for layer in model.layers]


def train(model: ToyModel, config: TrainConfig, dataset: SyntheticTask,
          optimizer_states: list | None = None) -> RunReport:
    """Run the full loop: merged forward, reverse backward, row updates.

    Steps cover [start_step, start_step + steps); since batches are keyed
    by absolute step index, resuming with start_step = s on restored state
    reproduces an uninterrupted run exactly.
    """
    config.validate()
    t0 = time.perf_counter()
    counters = {phase: OpCounters(phase) for phase in PHASES}
    states = optimizer_states
    if states is None:
        states = make_optimizer_states(model, config)
    losses = []
    nlayers = len(model.layers)
    for step in range(config.start_step, config.start_step + config.steps):
        x, y = dataset.sample(step, config.batch)
        h = x
        pre = []
        for i, layer in enumerate(model.layers):
            o = layer.forward(h, counters=counters["forward"])
            pre.append(o)
            h = _act(model.activation, o) if i < nlayers - 1 else o
        loss, g = loss_and_grad(h, y, model.loss)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss} at step {step}")
        losses.append(loss)
        for i in range(nlayers - 1, -1, -1):
            layer = model.layers[i]
            if isinstance(layer, MeldedLinear):
                dl_db, dl_dx = layer.backward(g, counters=counters["backward"])
                delta = optimizer_step(states[i], dl_db)
                layer.apply_update(delta, mode=config.buffer_mode)
            else:
                _, dl_db, dl_dx = layer.backward(
                    g, counters=counters["backward"])
                delta = optimizer_step(states[i], dl_db)
                layer.b = layer.b + delta
            if i > 0:
                g = dl_dx * _act_grad(model.activation, pre[i - 1])
    saturation = sum(layer.saturation_events for layer in model.layers
                     if isinstance(layer, MeldedLinear))
    wall_ms = (time.perf_counter() - t0) * 1e3
    return RunReport(config.as_dict(), losses,
                     {p: c.as_dict() for p, c in counters.items()},
                     saturation, wall_ms)


def evaluate_accuracy(model: ToyModel, x: np.ndarray,
                      labels: np.ndarray) -> float:
    """Fraction of columns whose argmax logit matches the label.

    Inference only: the per-layer backward caches left by forward are
    dropped so evaluation never blocks a later training step.
    """
    h = x
    nlayers = len(model.layers)
    for i, layer in enumerate(model.layers):
        o = layer.forward(h)
        if isinstance(layer, MeldedLinear):
            layer._saved_oa = None
        else:
            layer._saved_x = None
        h = _act(model.activation, o) if i < nlayers - 1 else o
    preds = np.argmax(h, axis=0)
    return float(np.mean(preds == np.asarray(labels).reshape(-1)))
