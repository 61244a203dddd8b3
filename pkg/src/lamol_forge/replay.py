"""Replay budgeting, pseudo-sample generation, and real-sample draws.

Before training task i the model (or the archived real data) supplies
samples standing in for tasks 1..i-1.  Budgets are floored fractions of
the incoming task's size; generated sequences are kept only when they
parse back into a valid sample.
"""

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import vocab as vb
from .data import parse_generated
from .model import sample_top_k

MODE_NONE = "NONE"
MODE_GEN = "GEN"
MODE_TASK = "TASK"
MODE_REAL = "REAL"
MODES = (MODE_NONE, MODE_GEN, MODE_TASK, MODE_REAL)

GEN_BUCKET = "all"

_RNG_GENERATE = 3
_RNG_DRAW = 4


def _seed_key(seed):
    return list(seed) if isinstance(seed, (list, tuple)) else [seed]


@dataclass(frozen=True)
class ReplayPlan:
    """Requested replay counts ahead of training task `task_index` (1-based).

    GEN mode keeps one aggregate count; TASK and REAL split the budget
    evenly (floored) across the task_index - 1 previous tasks.
    """

    task_index: int
    gamma: float
    mode: str
    aggregate_count: int = 0
    per_task_counts: tuple = ()

    @property
    def total_requested(self):
        if self.mode == MODE_GEN:
            return self.aggregate_count
        return sum(self.per_task_counts)


def compute_replay_plan(gamma, new_task_size, task_index, mode):
    if mode not in MODES:
        raise ValueError(f"unknown replay mode {mode!r}")
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if new_task_size < 0:
        raise ValueError(f"new_task_size must be non-negative, got {new_task_size}")
    if task_index < 1:
        raise ValueError(f"task_index must be >= 1, got {task_index}")
    if task_index == 1 or mode == MODE_NONE:
        return ReplayPlan(task_index=task_index, gamma=gamma, mode=mode)
    # 1e-9 slack so decimal gammas floor by value, not by float representation
    if mode == MODE_GEN:
        return ReplayPlan(
            task_index=task_index,
            gamma=gamma,
            mode=mode,
            aggregate_count=math.floor(gamma * new_task_size + 1e-9),
        )
    previous = task_index - 1
    each = math.floor(gamma * new_task_size / previous + 1e-9)
    return ReplayPlan(
        task_index=task_index,
        gamma=gamma,
        mode=mode,
        per_task_counts=(each,) * previous,
    )


@dataclass
class ReplayBatchSet:
    """Accepted replay samples per bucket plus bookkeeping on discards."""

    mode: str
    accepted: dict = field(default_factory=dict)
    requested: dict = field(default_factory=dict)
    attempts: int = 0
    discard_reasons: Counter = field(default_factory=Counter)

    @property
    def total_accepted(self):
        return sum(len(v) for v in self.accepted.values())

    @property
    def total_discarded(self):
        return sum(self.discard_reasons.values())

    def shortfall(self):
        return {
            bucket: self.requested[bucket] - len(self.accepted.get(bucket, []))
            for bucket in self.requested
            if self.requested[bucket] > len(self.accepted.get(bucket, []))
        }


def generate_pseudo_samples(
    model,
    plan,
    vocabulary,
    previous_task_names,
    k=20,
    max_new_tokens=None,
    seed=0,
    retry_rounds=3,
):
    """Sample sequences from the model and keep the ones that parse.

    GEN mode draws everything from the shared GEN token; TASK mode draws
    each previous task's budget from that task's token.  Each miss is
    retried up to retry_rounds extra times; attribution always follows the
    prefix token, never the generated content.
    """
    if plan.mode not in (MODE_GEN, MODE_TASK):
        raise ValueError(f"generate_pseudo_samples cannot serve mode {plan.mode!r}")
    if max_new_tokens is None:
        max_new_tokens = model.config.max_len - 1
    previous_task_names = list(previous_task_names)

    if plan.mode == MODE_GEN:
        buckets = [(GEN_BUCKET, vb.GEN_ID, plan.aggregate_count)]
    else:
        if len(previous_task_names) != len(plan.per_task_counts):
            raise ValueError(
                f"plan covers {len(plan.per_task_counts)} previous tasks, "
                f"got {len(previous_task_names)} names"
            )
        buckets = []
        for name, count in zip(previous_task_names, plan.per_task_counts):
            if name not in vocabulary.task_tokens:
                raise ValueError(f"no task token registered for {name!r}")
            buckets.append((name, vocabulary.task_tokens[name], count))

    base_key = _seed_key(seed)
    result = ReplayBatchSet(mode=plan.mode)
    for bucket_idx, (bucket, token_id, count) in enumerate(buckets):
        result.requested[bucket] = count
        result.accepted[bucket] = []
        draw_serial = 0
        for round_idx in range(retry_rounds + 1):
            need = count - len(result.accepted[bucket])
            if need <= 0:
                break
            for _ in range(need):
                rng = np.random.default_rng(
                    base_key
                    + [_RNG_GENERATE, plan.task_index, bucket_idx, draw_serial]
                )
                draw_serial += 1
                result.attempts += 1
                continuation = sample_top_k(
                    model, [token_id], k, max_new_tokens, rng
                )
                parsed = parse_generated([token_id] + continuation, vocabulary)
                if parsed.ok:
                    result.accepted[bucket].append(parsed.sample)
                else:
                    result.discard_reasons[parsed.reason] += 1
    return result


def draw_real_samples(previous_datasets, plan, seed=0):
    """Draw stored real samples per the plan: uniformly without replacement,
    falling back to replacement when a budget exceeds the dataset."""
    if plan.mode != MODE_REAL:
        raise ValueError(f"draw_real_samples cannot serve mode {plan.mode!r}")
    names = list(previous_datasets)
    if len(names) != len(plan.per_task_counts):
        raise ValueError(
            f"plan covers {len(plan.per_task_counts)} previous tasks, "
            f"got {len(names)} datasets"
        )
    base_key = _seed_key(seed)
    result = ReplayBatchSet(mode=plan.mode)
    for bucket_idx, (name, count) in enumerate(zip(names, plan.per_task_counts)):
        dataset = previous_datasets[name]
        result.requested[name] = count
        rng = np.random.default_rng(base_key + [_RNG_DRAW, plan.task_index, bucket_idx])
        if count <= len(dataset):
            picks = rng.choice(len(dataset), size=count, replace=False)
        else:
            picks = rng.choice(len(dataset), size=count, replace=True)
        result.accepted[name] = [dataset[int(i)] for i in picks]
        result.attempts += count
    return result
