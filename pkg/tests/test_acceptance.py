"""Acceptance gate: numerical oracles plus the full method ladder.

The oracle criteria (1-4, 10) run in seconds to minutes.  The behavioral
criteria (5-9) train a grid of lifelong runs: the 3-task stream
sort -> toysent -> reverse and a 4-task stream, methods FINETUNE /
LAMOL_GEN / LAMOL_TASK / LAMOL_REAL / MULTITASK, seeds 1-3.  Expect
roughly two hours on one CPU.  Progress and one `CRITERION n: PASS/FAIL`
line per criterion are written straight to the terminal (bypassing
pytest capture) so a long run stays observable.
"""

import sys
import time
from fractions import Fraction

import pytest

from lamol_forge import autodiff as ad
from lamol_forge import model as md
from lamol_forge import replay as rp
from lamol_forge import training as tr
from lamol_forge.data import make_synthetic_task, parse_generated
from lamol_forge.metrics import exact_match, normalized_f1
from oracle_cases import (
    METRIC_CASES,
    PARSE_CASES,
    encode_case,
    parse_suite_vocabulary,
)

N_TRAIN, N_TEST, MAX_LEN = 2048, 48, 48
SEEDS = (1, 2, 3)
STREAM3 = (("sort", 7), ("toysent", 8), ("reverse", 9))
STREAM4 = (("sort", 7), ("toysent", 8), ("reverse", 9), ("copy", 10))

_MC = md.ModelConfig(vocab_size=1, max_len=MAX_LEN)


def _say(text):
    sys.__stderr__.write(text + "\n")
    sys.__stderr__.flush()


def _verdict(number, ok, detail):
    _say(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {number}: {detail}"


def _stream(spec):
    return [
        make_synthetic_task(kind, N_TRAIN, N_TEST, seed=seed, name=kind)
        for kind, seed in spec
    ]


class _Grid:
    """Runs each (method, gamma, seed, stream) once and caches the summary."""

    def __init__(self):
        self._cache = {}

    def run(self, method, gamma, seed, stream=STREAM3, run_dir=None):
        key = (method, gamma, seed, stream)
        if key in self._cache and run_dir is None:
            return self._cache[key]
        config = tr.TrainConfig(method=method, gamma=gamma, seed=seed)
        started = time.time()
        runner = tr.run_multitask if method == tr.MULTITASK else tr.run_lifelong
        state = runner(
            _stream(stream), config, model_config=_MC,
            run_dir=run_dir, run_id=f"{method.lower()}_g{gamma}_s{seed}",
        )
        elapsed = time.time() - started
        names = [kind for kind, _ in stream]
        finals = {name: state.matrix.final_score(name) for name in names}
        first = names[0]
        first_task_peak = max(
            state.matrix.scores[(1, epoch, first)]
            for epoch in range(1, state.matrix.epochs + 1)
        )
        entry = {
            "finals": finals,
            "average": sum(finals.values()) / len(finals),
            "first": first,
            "first_final": finals[first],
            "first_task_peak": first_task_peak,
            "elapsed": elapsed,
        }
        self._cache[key] = entry
        shown = {name: round(score, 1) for name, score in finals.items()}
        _say(
            f"[grid] {method} gamma={gamma} seed={seed} tasks={len(names)}: "
            f"finals={shown} avg={entry['average']:.1f} ({elapsed:.0f}s)"
        )
        return entry


_GRID = _Grid()


# ------------------------------------------------------------- criterion 1


def test_criterion_1_gradients_match_finite_differences():
    started = time.time()
    model = md.LanguageModel(md.ModelConfig(vocab_size=16), seed=11)
    tokens = [5, 9, 12, 7, 2, 10, 6, 14, 8, 2, 13, 3]
    assert len(tokens) == 12
    mask = [False] * 8 + [True] * 4

    losses = {
        "qa": lambda: md.qa_loss(model, tokens, mask),
        "lm": lambda: md.lm_loss(model, tokens),
        "combined": lambda: md.combined_loss(
            md.qa_loss(model, tokens, mask), md.lm_loss(model, tokens), 0.25
        ),
    }
    worst = {
        name: ad.finite_difference_check(
            f, model.parameter_list(), max_checks_per_param=2
        )
        for name, f in losses.items()
    }
    elapsed = time.time() - started
    ok = max(worst.values()) < 1e-4 and elapsed < 60.0
    detail = (
        f"max discrepancy qa={worst['qa']:.2e} lm={worst['lm']:.2e} "
        f"combined={worst['combined']:.2e}, tolerance 1e-4, {elapsed:.1f}s of 60s"
    )
    _verdict(1, ok, detail)


# ------------------------------------------------------------- criterion 2


def test_criterion_2_replay_budgets_are_integer_exact():
    gammas = ("0", "0.01", "0.03", "0.05", "0.2", "0.25", "0.29", "0.5")
    sizes = (1, 7, 100, 1000, 2048, 6414)
    checked = 0
    failures = []
    for gamma_text in gammas:
        gamma = float(gamma_text)
        budget = Fraction(gamma_text)
        for size in sizes:
            total_exact = int(budget * size)
            for index in range(1, 7):
                plan = rp.compute_replay_plan(gamma, size, index, rp.MODE_GEN)
                expect = 0 if index == 1 else total_exact
                if plan.total_requested != expect:
                    failures.append((gamma_text, size, index, "GEN"))
                checked += 1
                plan = rp.compute_replay_plan(gamma, size, index, rp.MODE_TASK)
                if index == 1:
                    per_task = ()
                else:
                    per_task = (int(budget * size / (index - 1)),) * (index - 1)
                if plan.per_task_counts != per_task:
                    failures.append((gamma_text, size, index, "TASK"))
                checked += 1
    if rp.compute_replay_plan(0.2, 1000, 3, rp.MODE_TASK).per_task_counts != (100, 100):
        failures.append("(0.2, 1000, 3, TASK)")
    if rp.compute_replay_plan(0.05, 6414, 2, rp.MODE_GEN).total_requested != 320:
        failures.append("(0.05, 6414, 2, GEN)")
    _verdict(
        2,
        not failures,
        f"{checked} grid cells integer-exact, zero tolerance"
        + (f"; failures: {failures[:5]}" if failures else ""),
    )


# ------------------------------------------------------------- criterion 3


def test_criterion_3_generation_filter_on_crafted_suite():
    vocabulary = parse_suite_vocabulary()
    assert len(PARSE_CASES) == 50
    wrong = []
    for position, (tokens, expected) in enumerate(PARSE_CASES):
        result = parse_generated(encode_case(vocabulary, tokens), vocabulary)
        if expected[0] == "ok":
            _, context, answer = expected
            good = (
                result.sample is not None
                and result.sample.context == context
                and result.sample.answer == answer
            )
        else:
            good = result.sample is None and result.reason == expected[1]
        if not good:
            wrong.append(position)
    _verdict(
        3,
        not wrong,
        "50/50 crafted sequences parsed with exact outcomes"
        + (f"; wrong at {wrong}" if wrong else ""),
    )


# ------------------------------------------------------------- criterion 4


def test_criterion_4_metric_oracles():
    assert len(METRIC_CASES) == 20
    wrong = []
    for position, (pred, gold, em, f1) in enumerate(METRIC_CASES):
        if exact_match(pred, gold) != em:
            wrong.append(("em", position))
        if abs(normalized_f1(pred, gold) - f1) > 1e-9:
            wrong.append(("f1", position))
    _verdict(
        4,
        not wrong,
        "20/20 hand-computed metric values matched at 1e-9"
        + (f"; wrong: {wrong}" if wrong else ""),
    )


# ------------------------------------------------------------ criterion 10


def test_criterion_10_reruns_are_byte_identical(tmp_path):
    def one(tag):
        out = tmp_path / tag
        _GRID.run(tr.LAMOL_GEN, 0.05, 1, run_dir=str(out))
        with open(out / "metrics.csv", "rb") as fh:
            return fh.read()

    first, second = one("a"), one("b")
    _verdict(
        10,
        first == second and len(first) > 0,
        f"metric CSVs from twin runs identical ({len(first)} bytes)",
    )


# ------------------------------------------------------------- criterion 5


def test_criterion_5_finetune_forgets_first_task():
    drops = {}
    ok = True
    for seed in SEEDS:
        entry = _GRID.run(tr.FINETUNE, 0.0, seed)
        drop = entry["first_task_peak"] - entry["first_final"]
        drops[seed] = round(drop, 1)
        if drop < 30.0 or entry["elapsed"] >= 900.0:
            ok = False
    _verdict(5, ok, f"first-task drop by seed {drops}, need >= 30 each, < 15 min each")


# ------------------------------------------------------------- criterion 6


def test_criterion_6_generative_replay_mitigates():
    near_peak = 0
    margins = {}
    ok = True
    for seed in SEEDS:
        gen = _GRID.run(tr.LAMOL_GEN, 0.2, seed)
        ft = _GRID.run(tr.FINETUNE, 0.0, seed)
        if gen["first_final"] >= gen["first_task_peak"] - 15.0:
            near_peak += 1
        margin = gen["average"] - ft["average"]
        margins[seed] = round(margin, 1)
        if margin < 20.0:
            ok = False
    ok = ok and near_peak >= 2
    _verdict(
        6,
        ok,
        f"first task within 15 of peak in {near_peak}/3 seeds (need >= 2); "
        f"average margin over FINETUNE by seed {margins}, need >= 20",
    )


# ------------------------------------------------------------- criterion 7


def test_criterion_7_upper_bound_ordering():
    rows = {}
    ok = True
    for seed in SEEDS:
        mt = _GRID.run(tr.MULTITASK, 0.0, seed)["average"]
        real = _GRID.run(tr.LAMOL_REAL, 0.2, seed)["average"]
        gen = _GRID.run(tr.LAMOL_GEN, 0.2, seed)["average"]
        rows[seed] = tuple(round(v, 1) for v in (mt, real, gen))
        if not (mt >= real >= gen and mt - real <= 10.0 and real - gen <= 10.0):
            ok = False
    _verdict(
        7,
        ok,
        f"(MULTITASK, REAL, GEN) averages by seed {rows}; "
        f"need descending with gaps <= 10",
    )


# ------------------------------------------------------------- criterion 8


def test_criterion_8_gamma_sweep_is_monotone():
    curves = {}
    ok = True
    for method in (tr.LAMOL_GEN, tr.LAMOL_TASK):
        averages = []
        for gamma in (0.0, 0.05, 0.2):
            mean = sum(
                _GRID.run(method, gamma, seed)["average"] for seed in SEEDS
            ) / len(SEEDS)
            averages.append(round(mean, 1))
        curves[method] = averages
        if averages[1] < averages[0] - 3.0 or averages[2] < averages[1] - 3.0:
            ok = False
    _verdict(
        8,
        ok,
        f"3-seed mean averages over gamma 0 / 0.05 / 0.2: {curves}; "
        f"need non-decreasing within 3",
    )


# ------------------------------------------------------------- criterion 9


def test_criterion_9_task_tokens_help_on_longer_streams():
    task_mean = sum(
        _GRID.run(tr.LAMOL_TASK, 0.03, seed, stream=STREAM4)["first_final"]
        for seed in SEEDS
    ) / len(SEEDS)
    gen_mean = sum(
        _GRID.run(tr.LAMOL_GEN, 0.03, seed, stream=STREAM4)["first_final"]
        for seed in SEEDS
    ) / len(SEEDS)
    _verdict(
        9,
        task_mean >= gen_mean,
        f"4-task first-task final, 3-seed mean: TASK {task_mean:.1f} >= GEN {gen_mean:.1f}",
    )
