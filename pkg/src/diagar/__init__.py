"""diagar: raster-scan grid transformer with diagonal-parallel two-way decoding.

A small numpy engine for autoregressive generation over 2D token grids.
A standard raster-order transformer is post-trained into a two-way
generator that predicts rightward and downward neighbours from two
branch heads, fuses the two predictions with a learned gate, and decodes
one anti-diagonal at a time: H + W - 1 sequential steps instead of H * W.
"""

from .adapter import BranchConfig, DualHeadModel, FusionGate, fuse_logits
from .autodiff import NonFiniteError, Tape, Tensor
from .checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    expected_param_names,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .config import (
    ConfigError,
    RunConfig,
    derive_seed,
    dump_config,
    read_config_file,
    resolve_config,
)
from .data import (
    Dataset,
    EvalReport,
    SyntheticGridSpec,
    ValidityReport,
    default_palette,
    default_pattern_specs,
    eval_nll,
    generate_dataset,
    load_dataset,
    pattern_validity,
    render_grid,
    save_dataset,
    split_indices,
)
from .decoding import (
    BenchReport,
    CFGConfig,
    DecodeResult,
    DecodeTrace,
    SamplerConfig,
    bench,
    cfg_fuse,
    decode_diagonal,
    decode_raster,
    sample_tokens,
)
from .gradcheck import gradcheck
from .grid import (
    DiagonalSchedule,
    MaskSpec,
    OrderMapping,
    TokenGrid,
    diagonal_partition,
    inverse_reorder,
    predecessors,
    reorder,
)
from .model import Backbone, ConditionPrefix, KVCacheSet, ModelConfig, condition_rows
from .optim import AdamW, LRSchedule, ParamGroup
from .training import (
    LossWeights,
    ProbeResult,
    TrainResult,
    TrainSchedule,
    adapt,
    compute_losses,
    linear_probe,
    pretrain_raster,
    probe_budget,
    substream,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Backbone",
    "BenchReport",
    "BranchConfig",
    "CFGConfig",
    "Checkpoint",
    "ConditionPrefix",
    "ConfigError",
    "Dataset",
    "DecodeResult",
    "DecodeTrace",
    "DiagonalSchedule",
    "DualHeadModel",
    "EvalReport",
    "FusionGate",
    "KVCacheSet",
    "LRSchedule",
    "LossWeights",
    "MaskSpec",
    "ModelConfig",
    "NonFiniteError",
    "OrderMapping",
    "ParamGroup",
    "ProbeResult",
    "RunConfig",
    "SamplerConfig",
    "SyntheticGridSpec",
    "Tape",
    "Tensor",
    "TokenGrid",
    "TrainResult",
    "TrainSchedule",
    "ValidityReport",
    "adapt",
    "bench",
    "cfg_fuse",
    "checkpoint_from_model",
    "compute_losses",
    "condition_rows",
    "decode_diagonal",
    "decode_raster",
    "default_palette",
    "default_pattern_specs",
    "derive_seed",
    "diagonal_partition",
    "dump_config",
    "eval_nll",
    "expected_param_names",
    "fuse_logits",
    "generate_dataset",
    "gradcheck",
    "inverse_reorder",
    "linear_probe",
    "load_checkpoint",
    "load_dataset",
    "model_from_checkpoint",
    "pattern_validity",
    "predecessors",
    "pretrain_raster",
    "probe_budget",
    "read_config_file",
    "render_grid",
    "reorder",
    "resolve_config",
    "sample_tokens",
    "save_checkpoint",
    "save_dataset",
    "split_indices",
    "substream",
]
