"""Experiment configs, run orchestration, artifact manifest, inspection.

Config files are plain text: `[section]` headers group `key = value` lines,
`#` starts a comment, and values are scalars or space-separated lists.
Sections: [experiment], [model], [data], [task.<name>], [method.<label>].
"""

import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field
from multiprocessing import Pool

from .data import (
    EXTERNAL,
    SYNTHETIC_KINDS,
    TOYSENT,
    NEGATIVE_WORD,
    POSITIVE_WORD,
    load_external_task,
    make_synthetic_task,
    read_generated_dump,
)
from .metrics import summarize
from .model import ModelConfig
from .training import (
    METHODS,
    MULTITASK,
    TrainConfig,
    run_lifelong,
    run_multitask,
)
from . import vocab as vb

OUTPUT_ENV_VAR = "LAMOL_FORGE_OUT"
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    def __init__(self, line, column, message):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


def parse_config_text(text):
    """Parse the key/value grammar into {section: {key: value}}."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        indent = len(line) - len(line.lstrip()) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(lineno, len(line), "section header missing ']'")
            name = stripped[1:-1].strip()
            if not name:
                raise ConfigError(lineno, indent, "empty section name")
            if name in sections:
                raise ConfigError(lineno, indent, f"duplicate section [{name}]")
            sections[name] = {}
            current = name
            continue
        if current is None:
            raise ConfigError(lineno, indent, "key/value line before any [section]")
        if "=" not in stripped:
            raise ConfigError(lineno, indent, "expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(lineno, indent, "empty key")
        if key in sections[current]:
            raise ConfigError(lineno, indent, f"duplicate key {key!r} in [{current}]")
        sections[current][key] = value
    return sections


def _want(section, sections, lineno_hint=1):
    if section not in sections:
        raise ConfigError(lineno_hint, 1, f"missing required section [{section}]")
    return sections[section]


def _parse_bool(value, key):
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


@dataclass
class TaskDef:
    name: str
    kind: str
    metric: str = "EM"
    n_train: int | None = None
    n_test: int | None = None
    seed: int | None = None
    path: str | None = None
    test_path: str | None = None
    test_fraction: float = 0.2


@dataclass
class MethodDef:
    label: str
    train: TrainConfig
    dump_pseudo: bool = False


@dataclass
class ExperimentConfig:
    task_names: list
    permutations: bool
    seeds: list
    out: str
    model: ModelConfig
    tasks: dict = field(default_factory=dict)
    methods: list = field(default_factory=list)
    n_train: int = 512
    n_test: int = 48
    data_seed: int = 7


_MODEL_KEYS = {"layers", "width", "heads", "ff_width", "max_len"}
_METHOD_KEYS = {
    "method", "gamma", "lambda", "top_k", "epochs", "batch_size",
    "learning_rate", "retry_rounds", "regenerate_each_epoch",
    "eval_max_new_tokens", "dump_pseudo",
}
_TASK_KEYS = {
    "kind", "metric", "n_train", "n_test", "seed", "path", "test_path",
    "test_fraction",
}


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    sections = parse_config_text(text)
    try:
        return _interpret(sections)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(1, 1, str(exc)) from exc


def _interpret(sections):
    exp = _want("experiment", sections)
    if "tasks" not in exp:
        raise ValueError("[experiment] needs a 'tasks' list")
    task_names = exp["tasks"].split()
    if not task_names:
        raise ValueError("'tasks' must name at least one task")
    for name in task_names:
        if not all(ch.isalnum() or ch == "_" for ch in name) or name != name.lower():
            raise ValueError(f"task name {name!r} must be lowercase [a-z0-9_]+")
    permutations = exp.get("permutations", "none")
    if permutations not in ("all", "none"):
        raise ValueError(f"permutations must be 'all' or 'none', got {permutations!r}")
    seeds = [int(s) for s in exp.get("seeds", "0").split()]
    out = exp.get("out", "runs")

    model_kwargs = {}
    for key, value in sections.get("model", {}).items():
        if key not in _MODEL_KEYS:
            raise ValueError(f"[model] has unknown key {key!r}")
        model_kwargs[key] = int(value)
    model = ModelConfig(vocab_size=1, **model_kwargs)

    data = sections.get("data", {})
    n_train = int(data.get("n_train", 512))
    n_test = int(data.get("n_test", 48))
    data_seed = int(data.get("data_seed", 7))

    tasks = {}
    methods = []
    for section, body in sections.items():
        if section.startswith("task."):
            name = section[len("task.") :]
            unknown = set(body) - _TASK_KEYS
            if unknown:
                raise ValueError(f"[{section}] has unknown keys {sorted(unknown)}")
            tasks[name] = TaskDef(
                name=name,
                kind=body.get("kind", name).lower(),
                metric=body.get("metric", "EM").upper(),
                n_train=int(body["n_train"]) if "n_train" in body else None,
                n_test=int(body["n_test"]) if "n_test" in body else None,
                seed=int(body["seed"]) if "seed" in body else None,
                path=body.get("path"),
                test_path=body.get("test_path"),
                test_fraction=float(body.get("test_fraction", 0.2)),
            )
        elif section.startswith("method."):
            label = section[len("method.") :]
            unknown = set(body) - _METHOD_KEYS
            if unknown:
                raise ValueError(f"[{section}] has unknown keys {sorted(unknown)}")
            if "method" not in body:
                raise ValueError(f"[{section}] needs a 'method' key")
            method_name = body["method"]
            if method_name not in METHODS:
                raise ValueError(
                    f"[{section}] invalid method name {method_name!r}; "
                    f"choose from {', '.join(METHODS)}"
                )
            train = TrainConfig(
                method=method_name,
                gamma=float(body.get("gamma", 0.0)),
                lam=float(body.get("lambda", 0.25)),
                top_k=int(body.get("top_k", 20)),
                epochs_per_task=int(body.get("epochs", 9)),
                batch_size=int(body.get("batch_size", 16)),
                learning_rate=float(body.get("learning_rate", 3e-4)),
                retry_rounds=int(body.get("retry_rounds", 3)),
                regenerate_each_epoch=_parse_bool(
                    body.get("regenerate_each_epoch", "false"), "regenerate_each_epoch"
                ),
                eval_max_new_tokens=int(body.get("eval_max_new_tokens", 12)),
            )
            methods.append(
                MethodDef(
                    label=label,
                    train=train,
                    dump_pseudo=_parse_bool(body.get("dump_pseudo", "false"), "dump_pseudo"),
                )
            )
        elif section not in ("experiment", "model", "data"):
            raise ValueError(f"unknown section [{section}]")
    if not methods:
        raise ValueError("config declares no [method.*] sections")

    for name in task_names:
        definition = tasks.get(name)
        kind = definition.kind if definition else name
        if kind not in SYNTHETIC_KINDS and kind != EXTERNAL:
            raise ValueError(
                f"task {name!r}: kind {kind!r} is not a synthetic kind or 'external'"
            )
        if kind == EXTERNAL and (definition is None or definition.path is None):
            raise ValueError(f"task {name!r}: external tasks need a 'path'")

    return ExperimentConfig(
        task_names=task_names,
        permutations=permutations == "all",
        seeds=seeds,
        out=out,
        model=model,
        tasks=tasks,
        methods=methods,
        n_train=n_train,
        n_test=n_test,
        data_seed=data_seed,
    )


def build_tasks(config):
    """Materialize every task named by the config, in stream order."""
    built = {}
    for idx, name in enumerate(config.task_names):
        definition = config.tasks.get(name) or TaskDef(name=name, kind=name)
        n_train = definition.n_train or config.n_train
        n_test = definition.n_test or config.n_test
        seed = definition.seed if definition.seed is not None else config.data_seed + idx
        if definition.kind == EXTERNAL:
            task, skipped = load_external_task(
                definition.path,
                metric=definition.metric,
                name=name,
                test_path=definition.test_path,
                test_fraction=definition.test_fraction,
            )
            for lineno, reason in skipped:
                print(f"note: {definition.path}:{lineno}: skipped ({reason})")
        else:
            task = make_synthetic_task(
                definition.kind, n_train, n_test, seed, name=name, metric=definition.metric
            )
        built[name] = task
    return built


def _orders(config):
    if config.permutations:
        return [tuple(p) for p in itertools.permutations(config.task_names)]
    return [tuple(config.task_names)]


def plan_runs(config):
    """Enumerate (method, order, seed) runs; the multitask baseline ignores
    ordering so it runs once per seed on the canonical order."""
    runs = []
    for method in config.methods:
        orders = [tuple(config.task_names)] if method.train.method == MULTITASK else _orders(config)
        for order in orders:
            for seed in config.seeds:
                runs.append((method.label, order, seed))
    return runs


def run_id_for(label, order, seed):
    return f"{label}__{'-'.join(order)}__s{seed}"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_manifest(out_dir):
    path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    return {"runs": {}, "artifacts": {}}


def _save_manifest(out_dir, manifest):
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _register_run_artifacts(manifest, out_dir, run_dir):
    for root, dirs, files in os.walk(run_dir):
        dirs.sort()
        for fname in sorted(files):
            full = os.path.join(root, fname)
            rel = os.path.relpath(full, out_dir)
            manifest["artifacts"][rel] = _sha256(full)


def _execute_run(args):
    config, method, order, seed, out_dir = args
    run_id = run_id_for(method.label, order, seed)
    run_dir = os.path.join(out_dir, run_id)
    tasks_by_name = build_tasks(config)
    stream = [tasks_by_name[name] for name in order]
    train = TrainConfig(**{**method.train.__dict__, "seed": seed})
    if train.method == MULTITASK:
        state = run_multitask(stream, train, model_config=config.model,
                              run_dir=run_dir, run_id=run_id)
    else:
        state = run_lifelong(stream, train, model_config=config.model,
                             run_dir=run_dir, run_id=run_id,
                             dump_pseudo=method.dump_pseudo)
    report = summarize(state.matrix)
    run_summary = next(iter(report.per_order.values()))
    payload = {
        "run_id": run_id,
        "method": train.method,
        "label": method.label,
        "order": "-".join(order),
        "seed": seed,
        "gamma": train.gamma,
        "final_scores": run_summary.final_scores,
        "average": run_summary.average,
        "forgetting": run_summary.forgetting,
        "replay": state.replay_stats,
    }
    with open(os.path.join(run_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_id, payload


def run_experiment(config_path, out_override=None, seeds_override=None, jobs=1, resume=False):
    """Execute every planned run; returns a process exit code.

    Failed runs are recorded in the manifest and do not stop the others.
    """
    config = load_config(config_path)
    if seeds_override:
        config.seeds = list(seeds_override)
    out_dir = out_override or os.environ.get(OUTPUT_ENV_VAR) or config.out
    os.makedirs(out_dir, exist_ok=True)
    manifest = _load_manifest(out_dir)
    planned = plan_runs(config)

    todo = []
    for label, order, seed in planned:
        run_id = run_id_for(label, order, seed)
        if resume and manifest["runs"].get(run_id, {}).get("status") == "completed":
            print(f"skip {run_id} (already completed)")
            continue
        method = next(m for m in config.methods if m.label == label)
        todo.append((config, method, order, seed, out_dir))

    failures = 0
    results = []
    if jobs > 1 and len(todo) > 1:
        with Pool(processes=jobs) as pool:
            outcomes = pool.map(_execute_run_safe, todo)
    else:
        outcomes = [_execute_run_safe(args) for args in todo]
    for args, outcome in zip(todo, outcomes):
        _, method, order, seed, _ = args
        run_id = run_id_for(method.label, order, seed)
        if isinstance(outcome, Exception):
            failures += 1
            manifest["runs"][run_id] = {"status": "failed", "error": str(outcome)}
            print(f"FAILED {run_id}: {outcome}")
        else:
            _, payload = outcome
            results.append(payload)
            manifest["runs"][run_id] = {"status": "completed"}
            _register_run_artifacts(manifest, out_dir, os.path.join(out_dir, run_id))
            print(f"done {run_id}: average {payload['average']:.2f}")
        _save_manifest(out_dir, manifest)

    _write_aggregate_summary(out_dir, manifest, results)
    manifest["artifacts"][os.path.join("summary.json")] = _sha256(
        os.path.join(out_dir, "summary.json")
    )
    _save_manifest(out_dir, manifest)
    return 1 if failures else 0


def _execute_run_safe(args):
    try:
        return _execute_run(args)
    except Exception as exc:  # noqa: BLE001 - isolate per-run failures
        return exc


def _write_aggregate_summary(out_dir, manifest, results):
    import numpy as np

    summary_path = os.path.join(out_dir, "summary.json")
    existing = {}
    if os.path.exists(summary_path):
        with open(summary_path, encoding="utf-8") as fh:
            existing = json.load(fh).get("runs", {})
    for payload in results:
        existing[payload["run_id"]] = payload

    by_method = {}
    for payload in existing.values():
        by_method.setdefault(payload["label"], {}).setdefault(
            payload["order"], {}
        )[str(payload["seed"])] = {
            "average": payload["average"],
            "final_scores": payload["final_scores"],
            "forgetting": payload["forgetting"],
        }
    aggregate = {}
    for label, orders in sorted(by_method.items()):
        order_means = []
        for order, seeds in orders.items():
            order_means.append(float(np.mean([s["average"] for s in seeds.values()])))
        aggregate[label] = {
            "orders": orders,
            "mean_average": float(np.mean(order_means)),
            "std_over_orders": float(np.std(order_means)),
        }
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump({"runs": existing, "methods": aggregate}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def verify_manifest(out_dir):
    """Re-hash every artifact in the manifest; returns a list of problems."""
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        return [f"{manifest_path}: manifest not found"]
    manifest = _load_manifest(out_dir)
    problems = []
    for rel, expected in sorted(manifest.get("artifacts", {}).items()):
        full = os.path.join(out_dir, rel)
        if not os.path.exists(full):
            problems.append(f"{rel}: missing")
        elif _sha256(full) != expected:
            problems.append(f"{rel}: hash mismatch")
    return problems


_DIGIT_WORDS = set("0123456789")
_SENTIMENT_WORDS = {"positive", "negative"}


def _answer_space(answer):
    words = answer.split()
    if words and all(w in _DIGIT_WORDS for w in words):
        return "digits"
    if words and all(w in _SENTIMENT_WORDS for w in words):
        return "sentiment"
    return None


_EXPECTED_SPACE = {kind: ("sentiment" if kind == TOYSENT else "digits") for kind in SYNTHETIC_KINDS}


def inspect_pseudo(dump_path, n):
    """Human-readable listing of the first n dumped pseudo-samples.

    A sample is flagged as off-prompt when its answer clearly belongs to a
    different task family than its source token (for example a digit answer
    under the toysent token).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rows = read_generated_dump(dump_path)
    lines = []
    for i, (sample, token) in enumerate(rows[:n], start=1):
        name = token[2:-2] if vb.is_reserved_word(token) else token
        expected = _EXPECTED_SPACE.get(name)
        actual = _answer_space(sample.answer)
        chaos = expected is not None and actual is not None and expected != actual
        flag = "  [OFF-PROMPT]" if chaos else ""
        prompt = " ".join(p for p in (sample.context, sample.question) if p)
        lines.append(f"{i:4d}  source={token}{flag}")
        lines.append(f"      prompt: {prompt}")
        lines.append(f"      answer: {sample.answer}")
    if not lines:
        lines.append("(dump is empty)")
    return "\n".join(lines)
