"""Multi-step attention model for sentence-pair inference, with a training CLI."""

from .data import (
    THREE_WAY_LABELS,
    TWO_WAY_LABELS,
    DataError,
    ParseError,
    RawPair,
    SyntheticTaskSpec,
    TokenizedPair,
    TsvSchema,
    Vocabulary,
    load_embeddings,
    make_batches,
    read_snli_jsonl,
    read_token_cache,
    read_tsv_pairs,
    synthetic_generate,
    synthetic_label,
    tokenize,
    tokenize_pair,
    write_token_cache,
)
from .model import (
    ModelConfig,
    PairInput,
    SanParameters,
    StepOutputs,
    forward,
    nli_loss,
    single_step_forward,
)
from .optim import Adamax, LrSchedule
from .rng import RngStream
from .tensor import Tape, Tensor, backward
from .training import (
    CheckpointError,
    DivergenceError,
    MetricsRecord,
    RunConfig,
    TrainOutcome,
    compare_single_vs_multi,
    dump_step_predictions,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    sweep_steps,
    synthetic_model_config,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adamax",
    "CheckpointError",
    "DataError",
    "DivergenceError",
    "LrSchedule",
    "MetricsRecord",
    "ModelConfig",
    "PairInput",
    "ParseError",
    "RawPair",
    "RngStream",
    "RunConfig",
    "SanParameters",
    "StepOutputs",
    "SyntheticTaskSpec",
    "THREE_WAY_LABELS",
    "TWO_WAY_LABELS",
    "Tape",
    "Tensor",
    "TokenizedPair",
    "TrainOutcome",
    "TsvSchema",
    "Vocabulary",
    "backward",
    "compare_single_vs_multi",
    "dump_step_predictions",
    "evaluate",
    "forward",
    "load_checkpoint",
    "load_embeddings",
    "make_batches",
    "nli_loss",
    "predict",
    "read_snli_jsonl",
    "read_token_cache",
    "read_tsv_pairs",
    "save_checkpoint",
    "single_step_forward",
    "sweep_steps",
    "synthetic_generate",
    "synthetic_label",
    "synthetic_model_config",
    "tokenize",
    "tokenize_pair",
    "train",
    "write_token_cache",
]
