"""Low-bit quantization toolkit for small transformer language models.

Train a character- or word-level transformer from scratch, push its weights
onto learned low-bit grids with an ADMM loop, pick per-layer-cluster bit
widths either by Hessian-trace sensitivity or by a differentiable search
over uniform-precision branches, and report perplexity / size / compression.
"""

from .admm import AdmmOptions, TrainLog, TrainOptions, train_admm, train_baseline
from .checkpoint import (
    checkpoint_kind,
    load_model,
    load_quantized,
    save_model,
    save_quantized,
)
from .config import ExperimentConfig, load_config
from .corpus import Corpus, ingest_corpus, load_desk_corpus, write_desk_corpus
from .exceptions import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    DegenerateScaleError,
    IncompatibilityError,
    InfeasibleBudgetError,
    QuantLMError,
    ShapeError,
    TrainingDivergedError,
)
from .model import TransformerLM, forward_sequence, perplexity
from .nas import (
    PrecisionSearch,
    SearchOptions,
    SelectionWeights,
    Supernet,
    build_supernet,
    extract_1best,
    nas_loss,
    search,
)
from .pipeline import Pipeline, run_pipeline
from .quant import (
    ClusterQuantizer,
    LayerCluster,
    QuantizedModel,
    QuantTable,
    compression_ratio,
    default_clusters,
    fit_scale,
    full_model_size_mb,
    quantize_array,
    quantize_model,
    quantize_value,
)
from .report import ReportRow, load_rows, render_table, save_rows
from .sensitivity import (
    HessianSensitivity,
    MinSenAllocator,
    PrecisionAssignment,
    SensitivityReport,
    allocate_bits,
    hutchinson_trace,
    hvp,
    model_sensitivity_report,
)

__version__ = "0.1.0"

__all__ = [
    "AdmmOptions",
    "CheckpointFormatError",
    "ClusterQuantizer",
    "ConfigError",
    "Corpus",
    "DataError",
    "DegenerateScaleError",
    "ExperimentConfig",
    "HessianSensitivity",
    "IncompatibilityError",
    "InfeasibleBudgetError",
    "LayerCluster",
    "MinSenAllocator",
    "Pipeline",
    "PrecisionAssignment",
    "PrecisionSearch",
    "QuantLMError",
    "QuantTable",
    "QuantizedModel",
    "ReportRow",
    "SearchOptions",
    "SelectionWeights",
    "SensitivityReport",
    "ShapeError",
    "Supernet",
    "TrainLog",
    "TrainOptions",
    "TrainingDivergedError",
    "TransformerLM",
    "allocate_bits",
    "build_supernet",
    "checkpoint_kind",
    "compression_ratio",
    "default_clusters",
    "extract_1best",
    "fit_scale",
    "forward_sequence",
    "full_model_size_mb",
    "hutchinson_trace",
    "hvp",
    "ingest_corpus",
    "load_config",
    "load_desk_corpus",
    "load_model",
    "load_quantized",
    "load_rows",
    "model_sensitivity_report",
    "nas_loss",
    "perplexity",
    "quantize_array",
    "quantize_model",
    "quantize_value",
    "render_table",
    "run_pipeline",
    "save_model",
    "save_quantized",
    "save_rows",
    "search",
    "train_admm",
    "train_baseline",
    "write_desk_corpus",
]
