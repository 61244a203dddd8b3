"""Lifelong and multitask training loops.

One model moves through the task stream; before each new task the replay
engine contributes stand-ins for everything already learned, and each
optimizer step feeds the answering and generation shapes of the same batch
together.  Every epoch ends with a checkpoint and a full-stream evaluation.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import vocab as vb
from .data import format_example, write_generated_dump
from .metrics import ScoreMatrix, evaluate_task
from .model import (
    LanguageModel,
    ModelConfig,
    combined_loss,
    grow_embeddings,
    save_checkpoint,
    sequence_loss,
)
from .optim import adam_step, collect_grads, init_adam_state
from .replay import (
    MODE_GEN,
    MODE_NONE,
    MODE_REAL,
    MODE_TASK,
    GEN_BUCKET,
    compute_replay_plan,
    draw_real_samples,
    generate_pseudo_samples,
)

FINETUNE = "FINETUNE"
MULTITASK = "MULTITASK"
LAMOL_GEN = "LAMOL_GEN"
LAMOL_TASK = "LAMOL_TASK"
LAMOL_REAL = "LAMOL_REAL"
METHODS = (FINETUNE, MULTITASK, LAMOL_GEN, LAMOL_TASK, LAMOL_REAL)

_REPLAY_MODE = {
    FINETUNE: MODE_NONE,
    MULTITASK: MODE_NONE,
    LAMOL_GEN: MODE_GEN,
    LAMOL_TASK: MODE_TASK,
    LAMOL_REAL: MODE_REAL,
}

_RNG_MODEL = 1
_RNG_SHUFFLE = 2
_RNG_GROW = 5

CSV_HEADER = (
    "run_id",
    "method",
    "gamma",
    "seed",
    "train_task_index",
    "epoch",
    "eval_task",
    "metric_name",
    "score",
)


class TrainingDiverged(RuntimeError):
    """The loss went non-finite; training cannot continue."""


@dataclass
class TrainConfig:
    method: str
    gamma: float = 0.0
    lam: float = 0.25
    top_k: int = 20
    epochs_per_task: int = 9
    batch_size: int = 16
    learning_rate: float = 3e-4
    seed: int = 0
    retry_rounds: int = 3
    regenerate_each_epoch: bool = False
    eval_max_new_tokens: int = 12

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        for name in ("top_k", "epochs_per_task", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        # replay is meaningless for these baselines, and the directly
        # fine-tuned baseline does not optimize the generation loss at all
        if self.method in (FINETUNE, MULTITASK):
            self.gamma = 0.0
        if self.method == FINETUNE:
            self.lam = 0.0


@dataclass
class RunState:
    run_id: str
    config: TrainConfig
    vocabulary: object
    model: LanguageModel
    tasks: list
    matrix: ScoreMatrix
    run_dir: str | None = None
    checkpoint_paths: dict = field(default_factory=dict)
    replay_stats: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    csv_path: str | None = None

    def log_score(self, slot, epoch, task_name, metric_name, score):
        self.matrix.record(slot, epoch, task_name, score)
        row = (
            self.run_id,
            self.config.method,
            f"{self.config.gamma:g}",
            str(self.config.seed),
            str(slot),
            str(epoch),
            task_name,
            metric_name,
            f"{score:.6f}",
        )
        self.rows.append(row)
        if self.csv_path:
            write_header = not os.path.exists(self.csv_path)
            with open(self.csv_path, "a", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                if write_header:
                    writer.writerow(CSV_HEADER)
                writer.writerow(row)


def stream_corpus(tasks):
    for task in tasks:
        for sample in task.train:
            yield sample.context
            yield sample.question
            yield sample.answer


def build_vocabulary_for_stream(tasks, min_count=1):
    from .vocab import build_vocabulary

    return build_vocabulary(stream_corpus(tasks), min_count=min_count)


def _shuffled(n, config, slot, epoch):
    rng = np.random.default_rng([config.seed, _RNG_SHUFFLE, slot, epoch])
    return rng.permutation(n)


def _train_epoch(state, slot, epoch, formatted, config, optimizer):
    model = state.model
    params = model.parameter_list()
    order = _shuffled(len(formatted), config, slot, epoch)
    for start in range(0, len(order), config.batch_size):
        batch = [formatted[i] for i in order[start : start + config.batch_size]]
        ad.reset_tape()
        try:
            qa = sequence_loss(
                model,
                [ex.qa_tokens for ex in batch],
                [ex.qa_loss_mask for ex in batch],
            )
            if config.lam > 0:
                lm = sequence_loss(
                    model,
                    [ex.lm_tokens for ex in batch],
                    [(False,) + (True,) * (len(ex.lm_tokens) - 1) for ex in batch],
                )
                loss = combined_loss(qa, lm, config.lam)
            else:
                loss = qa
            ad.backward(loss)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(
                f"non-finite loss at task slot {slot}, epoch {epoch}, "
                f"batch {start // config.batch_size}: {exc}"
            ) from exc
        adam_step(params, collect_grads(params), optimizer, config.learning_rate)
        for p in params:
            p.zero_grad()
        ad.reset_tape()


def _after_epoch(state, slot, epoch, config):
    if state.run_dir:
        ckpt_dir = os.path.join(state.run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        path = os.path.join(ckpt_dir, f"task{slot}_epoch{epoch}.tensors")
        save_checkpoint(state.model, path, task_tokens=tuple(state.vocabulary.task_tokens))
        state.checkpoint_paths[(slot, epoch)] = path
    for task in state.tasks:
        score = evaluate_task(
            state.model,
            task.test,
            state.vocabulary,
            task.spec.metric,
            max_new_tokens=config.eval_max_new_tokens,
        )
        state.log_score(slot, epoch, task.name, task.spec.metric, score)


def train_on_task(state, slot, mixture, config):
    """Train for the configured epochs on a fixed (sample, generation token)
    mixture, checkpointing and evaluating the whole stream every epoch."""
    formatted = [
        format_example(sample, state.vocabulary, token_id, state.model.config.max_len)
        for sample, token_id in mixture
    ]
    optimizer = init_adam_state(state.model.parameter_list())
    for epoch in range(1, config.epochs_per_task + 1):
        _train_epoch(state, slot, epoch, formatted, config, optimizer)
        _after_epoch(state, slot, epoch, config)
    return state


def _pseudo_mixture(state, replay):
    """Flatten a ReplayBatchSet into (sample, generation token id) pairs."""
    pairs = []
    dump_rows = []
    for bucket, samples in replay.accepted.items():
        if replay.mode == MODE_TASK:
            token_id = state.vocabulary.task_tokens[bucket]
            token_str = vb.task_token(bucket)
        else:
            token_id = vb.GEN_ID
            token_str = vb.GEN
        for sample in samples:
            pairs.append((sample, token_id))
            dump_rows.append((sample, token_str))
    return pairs, dump_rows


def _record_replay(state, slot, replay, dump_rows, dump):
    state.replay_stats[slot] = {
        "mode": replay.mode,
        "requested": dict(replay.requested),
        "accepted": {k: len(v) for k, v in replay.accepted.items()},
        "attempts": replay.attempts,
        "discards": dict(replay.discard_reasons),
    }
    if dump and state.run_dir:
        pseudo_dir = os.path.join(state.run_dir, "pseudo")
        os.makedirs(pseudo_dir, exist_ok=True)
        write_generated_dump(
            os.path.join(pseudo_dir, f"task{slot}.tsv"), dump_rows
        )


def _init_run(tasks, config, model_config, run_dir, run_id, metrics_path):
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate task names in stream: {names}")
    vocabulary = build_vocabulary_for_stream(tasks)
    if model_config is None:
        model_config = ModelConfig(vocab_size=len(vocabulary))
    else:
        model_config = replace(model_config, vocab_size=len(vocabulary))
    model = LanguageModel(model_config, seed=[config.seed, _RNG_MODEL])
    slots = 1 if config.method == MULTITASK else len(tasks)
    matrix = ScoreMatrix(
        task_slots=slots,
        epochs=config.epochs_per_task,
        eval_tasks=tuple(names),
        meta={
            "run_id": run_id,
            "method": config.method,
            "gamma": config.gamma,
            "seed": config.seed,
            "order": "-".join(names),
        },
    )
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        vocabulary.save(os.path.join(run_dir, "vocab.txt"))
    return RunState(
        run_id=run_id,
        config=config,
        vocabulary=vocabulary,
        model=model,
        tasks=list(tasks),
        matrix=matrix,
        run_dir=run_dir,
        csv_path=metrics_path,
    )


def run_lifelong(tasks, config, model_config=None, run_dir=None, run_id="run", dump_pseudo=False):
    """Train through the task stream in order with the configured method."""
    if config.method == MULTITASK:
        raise ValueError("run_lifelong does not serve MULTITASK; use run_multitask")
    state = _init_run(tasks, config, model_config, run_dir, run_id, _metrics_path(run_dir))
    mode = _REPLAY_MODE[config.method]
    for slot, task in enumerate(tasks, start=1):
        plan = None
        if mode != MODE_NONE and slot > 1:
            plan = compute_replay_plan(config.gamma, len(task.train), slot, mode)
            if plan.total_requested == 0:
                plan = None
        replay_pairs = []
        if plan is not None and not (
            config.regenerate_each_epoch and mode in (MODE_GEN, MODE_TASK)
        ):
            replay = _build_replay(state, tasks, slot, plan, config, seed=config.seed)
            replay_pairs, dump_rows = _pseudo_mixture(state, replay)
            _record_replay(state, slot, replay, dump_rows, dump_pseudo)
        if config.method == LAMOL_TASK:
            new_token = state.vocabulary.add_task_token(task.name)
            grow_rng = np.random.default_rng([config.seed, _RNG_GROW, slot])
            grow_embeddings(state.model, len(state.vocabulary), rng=grow_rng)
        else:
            new_token = vb.GEN_ID
        new_pairs = [(sample, new_token) for sample in task.train]
        if plan is not None and config.regenerate_each_epoch and mode in (MODE_GEN, MODE_TASK):
            # fresh pseudo-samples ahead of every epoch instead of one batch
            # reused for the whole task
            optimizer = init_adam_state(state.model.parameter_list())
            for epoch in range(1, config.epochs_per_task + 1):
                replay = _build_replay(
                    state, tasks, slot, plan, config, seed=[config.seed, epoch]
                )
                replay_pairs, dump_rows = _pseudo_mixture(state, replay)
                if epoch == config.epochs_per_task:
                    _record_replay(state, slot, replay, dump_rows, dump_pseudo)
                formatted = [
                    format_example(s, state.vocabulary, t, state.model.config.max_len)
                    for s, t in new_pairs + replay_pairs
                ]
                _train_epoch(state, slot, epoch, formatted, config, optimizer)
                _after_epoch(state, slot, epoch, config)
        else:
            train_on_task(state, slot, new_pairs + replay_pairs, config)
    return state


def _build_replay(state, tasks, slot, plan, config, seed):
    if plan.mode == MODE_REAL:
        previous = {t.name: t.train for t in tasks[: slot - 1]}
        return draw_real_samples(previous, plan, seed=seed)
    return generate_pseudo_samples(
        state.model,
        plan,
        state.vocabulary,
        previous_task_names=[t.name for t in tasks[: slot - 1]],
        k=config.top_k,
        seed=seed,
        retry_rounds=config.retry_rounds,
    )


def run_multitask(tasks, config, model_config=None, run_dir=None, run_id="run"):
    """Train one model on the concatenation of every task's training data."""
    if config.method != MULTITASK:
        raise ValueError(f"run_multitask requires method MULTITASK, got {config.method}")
    state = _init_run(tasks, config, model_config, run_dir, run_id, _metrics_path(run_dir))
    mixture = [(sample, vb.GEN_ID) for task in tasks for sample in task.train]
    train_on_task(state, 1, mixture, config)
    return state


def _metrics_path(run_dir):
    return os.path.join(run_dir, "metrics.csv") if run_dir else None
