"""Cell type annotation with a frozen encoder and per-tissue LoRA plugins.

The pieces compose in dependency order: data loading and synthesis, the
shared encoder, mixture-of-LoRA plugins with a reserved-capacity head,
plugin training, the vector memory, novelty detection, the staged query
planner, and evaluation. `celltyper.cli:main` wires them into a workspace
workflow.
"""

from .data import (
    RESERVED_CAPACITY,
    UNKNOWN,
    UNKNOWN_NAME,
    GeneExpressionMatrix,
    LabelVocabulary,
    LoadedData,
    SynthesisConfig,
    load_matrix,
    normalize,
    stratified_split,
    synthesize,
)
from .encoder import EncoderConfig, EncoderParams, init_encoder, pretrain_ssl
from .adapters import MoeLoraPlugin, PluginRegistry, init_plugin
from .training import TrainConfig, TrainReport, incremental_train, train_plugin
from .memory import DatasetStore, EmbeddingRecord, HistoryLog, VectorStore, build_index
from .detection import DetectionParams, OracleConfig, build_detector, detect_batch
from .planner import ExecutionEnv, RunResult, SystemState, replay, run_query
from .evaluation import IncrementalSweepConfig, incremental_sweep, metrics
from .errors import CellTyperError

__version__ = "0.1.0"

__all__ = [
    "RESERVED_CAPACITY",
    "UNKNOWN",
    "UNKNOWN_NAME",
    "CellTyperError",
    "DatasetStore",
    "DetectionParams",
    "EmbeddingRecord",
    "EncoderConfig",
    "EncoderParams",
    "ExecutionEnv",
    "GeneExpressionMatrix",
    "HistoryLog",
    "IncrementalSweepConfig",
    "LabelVocabulary",
    "LoadedData",
    "MoeLoraPlugin",
    "OracleConfig",
    "PluginRegistry",
    "RunResult",
    "SynthesisConfig",
    "SystemState",
    "TrainConfig",
    "TrainReport",
    "VectorStore",
    "build_detector",
    "build_index",
    "detect_batch",
    "incremental_sweep",
    "incremental_train",
    "init_encoder",
    "init_plugin",
    "load_matrix",
    "metrics",
    "normalize",
    "pretrain_ssl",
    "replay",
    "run_query",
    "stratified_split",
    "synthesize",
    "train_plugin",
]
