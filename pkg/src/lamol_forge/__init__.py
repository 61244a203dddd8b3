"""Small-scale lifelong language learning with generative replay."""

from . import autodiff
from .autodiff import (
    NonFiniteError,
    ShapeMismatch,
    TapeError,
    Tensor,
    backward,
    finite_difference_check,
    load_tensors,
    no_grad,
    reset_tape,
    save_tensors,
)
from .data import (
    FormattedExample,
    ParseResult,
    Sample,
    Task,
    TaskSpec,
    format_example,
    load_external_task,
    make_sample,
    make_synthetic_task,
    parse_generated,
    read_generated_dump,
    write_generated_dump,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    inspect_pseudo,
    load_config,
    run_experiment,
    verify_manifest,
)
from .metrics import (
    Report,
    RunSummary,
    ScoreMatrix,
    evaluate_task,
    exact_match,
    normalized_f1,
    summarize,
)
from .model import (
    LanguageModel,
    ModelConfig,
    combined_loss,
    greedy_decode,
    grow_embeddings,
    load_checkpoint,
    lm_loss,
    qa_loss,
    sample_top_k,
    save_checkpoint,
)
from .optim import AdamState, adam_step, init_adam_state
from .replay import (
    MODE_GEN,
    MODE_NONE,
    MODE_REAL,
    MODE_TASK,
    ReplayPlan,
    compute_replay_plan,
    draw_real_samples,
    generate_pseudo_samples,
)
from .training import (
    FINETUNE,
    LAMOL_GEN,
    LAMOL_REAL,
    LAMOL_TASK,
    MULTITASK,
    TrainConfig,
    TrainingDiverged,
    run_lifelong,
    run_multitask,
)
from .vocab import Vocabulary, build_vocabulary, task_token

__all__ = [
    "AdamState",
    "ConfigError",
    "ExperimentConfig",
    "FINETUNE",
    "FormattedExample",
    "LAMOL_GEN",
    "LAMOL_REAL",
    "LAMOL_TASK",
    "LanguageModel",
    "MODE_GEN",
    "MODE_NONE",
    "MODE_REAL",
    "MODE_TASK",
    "MULTITASK",
    "ModelConfig",
    "NonFiniteError",
    "ParseResult",
    "Report",
    "ReplayPlan",
    "RunSummary",
    "Sample",
    "ScoreMatrix",
    "ShapeMismatch",
    "TapeError",
    "Task",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "Vocabulary",
    "adam_step",
    "autodiff",
    "backward",
    "build_vocabulary",
    "combined_loss",
    "compute_replay_plan",
    "draw_real_samples",
    "evaluate_task",
    "exact_match",
    "finite_difference_check",
    "format_example",
    "generate_pseudo_samples",
    "greedy_decode",
    "grow_embeddings",
    "init_adam_state",
    "inspect_pseudo",
    "lm_loss",
    "load_checkpoint",
    "load_config",
    "load_external_task",
    "load_tensors",
    "make_sample",
    "make_synthetic_task",
    "no_grad",
    "normalized_f1",
    "parse_generated",
    "qa_loss",
    "read_generated_dump",
    "reset_tape",
    "run_experiment",
    "run_lifelong",
    "run_multitask",
    "sample_top_k",
    "save_checkpoint",
    "save_tensors",
    "summarize",
    "task_token",
    "verify_manifest",
    "write_generated_dump",
]
