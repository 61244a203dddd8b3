"""Answer scoring, per-run score matrices, and cross-run summaries."""

import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import vocab as vb
from .model import greedy_decode_batch

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def _normalize_em(text):
    return " ".join(text.lower().split())


def exact_match(prediction, gold):
    """1 if the answers match after lowercasing and whitespace collapse."""
    return int(_normalize_em(prediction) == _normalize_em(gold))


def _normalize_f1(text):
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return text.split()


def normalized_f1(prediction, gold):
    """Bag-of-token F1 after lowercasing, punctuation and article removal.

    Two empty bags score 1.0; exactly one empty bag scores 0.0.
    """
    pred = Counter(_normalize_f1(prediction))
    ref = Counter(_normalize_f1(gold))
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((pred & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(pred.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


METRIC_FNS = {"EM": exact_match, "NF1": normalized_f1}


def evaluate_task(model, samples, vocabulary, metric, max_new_tokens=12):
    """Greedy-decode each test prompt and score against gold; returns 0..100.

    The prompt is context + question + ANS; the decoded text is cut at EOS
    (or scored as-is when the budget runs out first).
    """
    if metric not in METRIC_FNS:
        raise ValueError(f"unknown metric {metric!r}")
    if model.config.vocab_size != len(vocabulary):
        raise ValueError(
            f"model vocab {model.config.vocab_size} != vocabulary size {len(vocabulary)}"
        )
    if not samples:
        raise ValueError("evaluate_task got no samples")
    score_fn = METRIC_FNS[metric]
    limit = model.config.max_len - 1
    prompts = []
    for sample in samples:
        ids = vocabulary.encode(sample.context) + vocabulary.encode(sample.question)
        ids = ids[max(0, len(ids) + 1 - limit) :] + [vb.ANS_ID]
        prompts.append(ids)
    continuations = greedy_decode_batch(model, prompts, max_new_tokens)
    total = 0.0
    for sample, cont in zip(samples, continuations):
        if vb.EOS_ID in cont:
            cont = cont[: cont.index(vb.EOS_ID)]
        prediction = vocabulary.decode(cont)
        total += score_fn(prediction, sample.answer)
    return 100.0 * total / len(samples)


@dataclass
class ScoreMatrix:
    """Scores indexed by (training slot, epoch, evaluated task)."""

    task_slots: int
    epochs: int
    eval_tasks: tuple
    meta: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)

    def record(self, slot, epoch, eval_task, score):
        if not 1 <= slot <= self.task_slots or not 1 <= epoch <= self.epochs:
            raise ValueError(f"cell ({slot}, {epoch}) outside the declared grid")
        if eval_task not in self.eval_tasks:
            raise ValueError(f"unknown eval task {eval_task!r}")
        self.scores[(slot, epoch, eval_task)] = float(score)

    def missing_cells(self):
        return [
            (slot, epoch, task)
            for slot in range(1, self.task_slots + 1)
            for epoch in range(1, self.epochs + 1)
            for task in self.eval_tasks
            if (slot, epoch, task) not in self.scores
        ]

    def final_score(self, eval_task):
        return self.scores[(self.task_slots, self.epochs, eval_task)]

    def peak_score(self, eval_task):
        return max(
            self.scores[(s, e, eval_task)]
            for s in range(1, self.task_slots + 1)
            for e in range(1, self.epochs + 1)
        )


@dataclass(frozen=True)
class RunSummary:
    order: str
    final_scores: dict
    average: float
    forgetting: dict


@dataclass(frozen=True)
class Report:
    per_order: dict
    mean_average: float
    std_average: float


def summarize(matrices):
    """Summarize one or more completed runs.

    Per run: final per-task scores, their mean, and forgetting (peak minus
    final) per task.  Across runs: mean and population std of the averages.
    """
    if isinstance(matrices, ScoreMatrix):
        matrices = [matrices]
    matrices = list(matrices)
    if not matrices:
        raise ValueError("summarize got no matrices")
    per_order = {}
    for idx, matrix in enumerate(matrices):
        missing = matrix.missing_cells()
        if missing:
            head = ", ".join(str(c) for c in missing[:5])
            raise ValueError(
                f"score matrix {idx} incomplete: {len(missing)} missing cells ({head}...)"
            )
        finals = {task: matrix.final_score(task) for task in matrix.eval_tasks}
        forgetting = {
            task: matrix.peak_score(task) - finals[task] for task in matrix.eval_tasks
        }
        order = matrix.meta.get("order", f"run{idx}")
        if order in per_order:
            order = f"{order}#{idx}"
        per_order[order] = RunSummary(
            order=order,
            final_scores=finals,
            average=float(np.mean(list(finals.values()))),
            forgetting=forgetting,
        )
    averages = [s.average for s in per_order.values()]
    return Report(
        per_order=per_order,
        mean_average=float(np.mean(averages)),
        std_average=float(np.std(averages)),
    )
