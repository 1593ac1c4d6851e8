"""Software emulation of FP8 quantized-LoRA fine-tuning with melded adapters."""

from .checkpoint import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    deserialize,
    load_checkpoint,
    save_checkpoint,
    serialize,
)
from .config import OutputPaths, RunSetup, load_config
from .fp8 import (
    E4M3,
    E5M2,
    Fp8Format,
    QuantizedTensor,
    compute_scale,
    decode_array,
    decode_fp8,
    dequantize_tensor,
    encode_array,
    encode_fp8,
    get_format,
    quantize_tensor,
)
from .melded import BUFFER_MODES, MeldedLinear, init_melded
from .ops import (
    DEQUANTIZE_BYTES_PER_ELEM,
    PHASES,
    QUANTIZE_BYTES_PER_ELEM,
    OpCounters,
    concat_rows,
    fp8_matmul,
    matmul,
    split_rows,
    transpose_quantized,
)
from .overhead import (
    PATHS,
    CostParams,
    find_crossover,
    parse_breakdown,
    predict_times,
    render_breakdown,
    speedup_curve,
    total_time,
)
from .reference import ExplicitLoraLayer, init_explicit
from .svd import TruncatedSvd, factor_to_lora, truncated_svd
from .training import (
    ACTIVATIONS,
    LOSSES,
    TASKS,
    VARIANTS,
    OptimizerState,
    RunReport,
    SyntheticTask,
    ToyModel,
    TrainConfig,
    TrainingDiverged,
    build_model,
    build_task,
    evaluate_accuracy,
    loss_and_grad,
    make_optimizer_states,
    optimizer_step,
    synthetic_dataset,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ACTIVATIONS",
    "BUFFER_MODES",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "CostParams",
    "DEQUANTIZE_BYTES_PER_ELEM",
    "E4M3",
    "E5M2",
    "ExplicitLoraLayer",
    "Fp8Format",
    "LOSSES",
    "MeldedLinear",
    "OpCounters",
    "OptimizerState",
    "OutputPaths",
    "PATHS",
    "PHASES",
    "QUANTIZE_BYTES_PER_ELEM",
    "QuantizedTensor",
    "RunReport",
    "RunSetup",
    "SyntheticTask",
    "TASKS",
    "ToyModel",
    "TrainConfig",
    "TrainingDiverged",
    "TruncatedSvd",
    "VARIANTS",
    "build_model",
    "build_task",
    "compute_scale",
    "concat_rows",
    "decode_array",
    "decode_fp8",
    "dequantize_tensor",
    "deserialize",
    "encode_array",
    "encode_fp8",
    "evaluate_accuracy",
    "factor_to_lora",
    "find_crossover",
    "fp8_matmul",
    "get_format",
    "init_explicit",
    "init_melded",
    "load_checkpoint",
    "load_config",
    "loss_and_grad",
    "make_optimizer_states",
    "matmul",
    "optimizer_step",
    "parse_breakdown",
    "predict_times",
    "quantize_tensor",
    "render_breakdown",
    "save_checkpoint",
    "serialize",
    "speedup_curve",
    "split_rows",
    "synthetic_dataset",
    "total_time",
    "train",
    "transpose_quantized",
    "truncated_svd",
    "__version__",
]
