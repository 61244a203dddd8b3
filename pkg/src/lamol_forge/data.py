"""Samples, training-sequence formats, and task construction.

Every example is trained in two shapes built from the same fields:
the answering shape `context question ANS answer EOS` (loss on answer+EOS)
and the generation shape, which prepends a generation token and takes loss
everywhere after that first token.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import vocab as vb

NO_ANS = "NO_ANS"
MULTI_ANS = "MULTI_ANS"
EMPTY_ANSWER = "EMPTY_ANSWER"
NO_EOS = "NO_EOS"
REJECT_REASONS = (NO_ANS, MULTI_ANS, EMPTY_ANSWER, NO_EOS)

COPY, REVERSE, SORT, TOYSENT, ADD = "copy", "reverse", "sort", "toysent", "add"
SYNTHETIC_KINDS = (COPY, REVERSE, SORT, TOYSENT, ADD)
EXTERNAL = "external"

POSITIVE_WORD, NEGATIVE_WORD = "good", "bad"

_FORBIDDEN_CHARS = ("\t", "\n", "\r")


def sanitize_text(text):
    """Drop reserved dunder words and control characters, collapse spaces."""
    for ch in _FORBIDDEN_CHARS:
        text = text.replace(ch, " ")
    return " ".join(w for w in text.split() if not vb.is_reserved_word(w))


@dataclass(frozen=True)
class Sample:
    context: str
    question: str
    answer: str

    def __post_init__(self):
        for name, value in (
            ("context", self.context),
            ("question", self.question),
            ("answer", self.answer),
        ):
            if any(ch in value for ch in _FORBIDDEN_CHARS):
                raise ValueError(f"sample {name} contains tab or newline")
            if any(vb.is_reserved_word(w) for w in value.split()):
                raise ValueError(f"sample {name} contains a reserved control word")
        if not self.answer.strip():
            raise ValueError("sample answer must be non-empty")


def make_sample(context, question, answer):
    """Sanitize raw field text and build a Sample."""
    return Sample(
        context=sanitize_text(context),
        question=sanitize_text(question),
        answer=sanitize_text(answer),
    )


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    metric: str = "EM"
    n_train: int = 0
    n_test: int = 0
    gen_token_id: int | None = None

    def __post_init__(self):
        if self.metric not in ("EM", "NF1"):
            raise ValueError(f"metric must be EM or NF1, got {self.metric!r}")


@dataclass
class Task:
    spec: TaskSpec
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train or not self.test:
            raise ValueError(f"task {self.spec.name!r} needs non-empty train and test")
        train_keys = {(s.context, s.question, s.answer) for s in self.train}
        test_keys = {(s.context, s.question, s.answer) for s in self.test}
        shared = train_keys & test_keys
        if shared:
            raise ValueError(
                f"task {self.spec.name!r} has {len(shared)} samples in both splits"
            )
        self.spec = replace(self.spec, n_train=len(self.train), n_test=len(self.test))

    @property
    def name(self):
        return self.spec.name


@dataclass(frozen=True)
class FormattedExample:
    qa_tokens: tuple
    qa_loss_mask: tuple
    lm_tokens: tuple


def format_example(sample, vocabulary, gen_token_id, max_len):
    """Encode a sample into its answering and generation shapes.

    If the sequence is too long, prompt words are dropped from the front;
    answer tokens, ANS, and EOS are never dropped.  One slot is always
    reserved for the generation token so both shapes fit max_len.
    """
    if gen_token_id not in vocabulary.generation_token_ids():
        raise ValueError(f"id {gen_token_id} is not a registered generation token")
    prompt = vocabulary.encode(sample.context) + vocabulary.encode(sample.question)
    answer = vocabulary.encode(sample.answer)
    tail = [vb.ANS_ID] + answer + [vb.EOS_ID]
    budget = max_len - 1 - len(tail)
    if budget < 0:
        raise ValueError(
            f"answer needs {len(tail)} tokens plus the generation slot, "
            f"which exceeds max_len {max_len}"
        )
    if len(prompt) > budget:
        prompt = prompt[len(prompt) - budget :]
    qa = prompt + tail
    mask = [False] * (len(prompt) + 1) + [True] * (len(answer) + 1)
    lm = [gen_token_id] + qa
    return FormattedExample(
        qa_tokens=tuple(qa), qa_loss_mask=tuple(mask), lm_tokens=tuple(lm)
    )


@dataclass(frozen=True)
class ParseResult:
    sample: Sample | None = None
    reason: str | None = None

    @property
    def ok(self):
        return self.sample is not None


def parse_generated(ids, vocabulary):
    """Recover a Sample from generated token ids, or reject it.

    Checks run in a fixed order: the sequence is cut at its first EOS
    (absent -> NO_EOS), the content before it must hold exactly one ANS
    (NO_ANS / MULTI_ANS), and the span after ANS must survive sanitization
    (EMPTY_ANSWER).  A leading generation token is stripped first; the
    recovered prompt is kept as one concatenated context field.
    """
    ids = list(ids)
    if ids and ids[0] in vocabulary.generation_token_ids():
        ids = ids[1:]
    if vb.EOS_ID not in ids:
        return ParseResult(reason=NO_EOS)
    content = ids[: ids.index(vb.EOS_ID)]
    n_ans = content.count(vb.ANS_ID)
    if n_ans == 0:
        return ParseResult(reason=NO_ANS)
    if n_ans > 1:
        return ParseResult(reason=MULTI_ANS)
    split = content.index(vb.ANS_ID)
    prompt_text = sanitize_text(vocabulary.decode(content[:split]))
    answer_text = sanitize_text(vocabulary.decode(content[split + 1 :]))
    if not answer_text:
        return ParseResult(reason=EMPTY_ANSWER)
    return ParseResult(sample=Sample(prompt_text, "", answer_text))


def _digit_words(rng, length):
    return " ".join(str(d) for d in rng.integers(0, 10, size=length))


_KIND_INDEX = {k: i for i, k in enumerate(SYNTHETIC_KINDS)}


# The tasks interfere through the model's shared weights, not through
# shared tokens: SORT works entirely in spelled-out digit words, a surface
# vocabulary no later task ever trains on.  Replayed sort samples then
# anchor embeddings and output rows that the current task's gradients are
# not simultaneously rewriting, which is what lets a handful of replayed
# samples hold the task.  Sort answers re-select tokens from the prompt
# (the sorted sequence), so a sampler replaying the task reproduces them
# largely by attention rather than by recall, and digits within a
# sequence are distinct so each answer position has one right choice.
_SEQUENCE_PREFIX = {COPY: "copy :", REVERSE: "sequence :", SORT: "digits :"}
_SEQUENCE_LENGTHS = {COPY: (3, 5), REVERSE: (4, 6), SORT: (3, 5)}
_DIGIT_WORDS = (
    "zero", "one", "two", "three", "four",
    "five", "six", "seven", "eight", "nine",
)

_SEQUENCE_QUESTION = {
    COPY: "copy ?",
    REVERSE: "what is the reverse ?",
    SORT: "sort ?",
}


def _draw_sequence_sample(kind, rng):
    lo, hi = _SEQUENCE_LENGTHS[kind]
    length = int(rng.integers(lo, hi))
    values = rng.choice(10, size=length, replace=False)
    question = _SEQUENCE_QUESTION[kind]
    if kind == SORT:
        words = [_DIGIT_WORDS[int(d)] for d in values]
        context = _SEQUENCE_PREFIX[kind] + " " + " ".join(words)
        answer = " ".join(_DIGIT_WORDS[int(d)] for d in sorted(values))
        return Sample(context, question, answer)
    digits = [str(d) for d in values]
    context = _SEQUENCE_PREFIX[kind] + " " + " ".join(digits)
    if kind == COPY:
        answer = " ".join(digits)
    else:
        answer = " ".join(reversed(digits))
    return Sample(context, question, answer)


_TOYSENT_FILLERS = (
    "movie", "meal", "plot", "song", "place", "story", "trip", "show",
)


def _draw_toysent_sample(rng):
    fillers = [_TOYSENT_FILLERS[i] for i in rng.integers(0, len(_TOYSENT_FILLERS), size=4)]
    positive = bool(rng.integers(0, 2))
    keyword = POSITIVE_WORD if positive else NEGATIVE_WORD
    slot = int(rng.integers(0, len(fillers) + 1))
    words = fillers[:slot] + [keyword] + fillers[slot:]
    return Sample(
        " ".join(words),
        "is the mood positive or negative ?",
        "positive" if positive else "negative",
    )


def _draw_add_sample(rng):
    a, b = (int(x) for x in rng.integers(10, 100, size=2))
    spell = lambda n: " ".join(str(n))
    return Sample(
        f"numbers : {spell(a)} plus {spell(b)}",
        "what is the sum ?",
        spell(a + b),
    )


def make_synthetic_task(kind, n_train, n_test, seed, name=None, metric="EM"):
    """Deterministically generate a task with disjoint train/test splits.

    All kinds share the digit words 0..9 so that successive tasks compete
    for the same vocabulary while demanding different answer functions.
    """
    kind = kind.lower()
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic task kind {kind!r}")
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be positive")
    rng = np.random.default_rng([seed, _KIND_INDEX[kind]])
    samples = []
    seen = set()
    guard = 0
    while len(samples) < n_train + n_test:
        if kind in (COPY, REVERSE, SORT):
            sample = _draw_sequence_sample(kind, rng)
        elif kind == TOYSENT:
            sample = _draw_toysent_sample(rng)
        else:
            sample = _draw_add_sample(rng)
        if sample.context not in seen:
            seen.add(sample.context)
            samples.append(sample)
        guard += 1
        if guard > 200 * (n_train + n_test):
            raise ValueError(
                f"could not draw {n_train + n_test} distinct {kind} samples"
            )
    spec = TaskSpec(name=name or kind, kind=kind, metric=metric)
    return Task(spec=spec, train=samples[:n_train], test=samples[n_train:])


def read_samples_tsv(path):
    """Read tab-separated context/question/answer lines.

    Returns (samples, skipped) where skipped lists (line_number, reason)
    for malformed lines.  A fourth column, when present, is ignored here.
    """
    samples = []
    skipped = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                skipped.append((lineno, f"expected 3 or 4 tab-separated fields, got {len(parts)}"))
                continue
            context, question, answer = parts[0], parts[1], parts[2]
            if not sanitize_text(answer):
                skipped.append((lineno, "empty answer"))
                continue
            samples.append(make_sample(context, question, answer))
    return samples, skipped


def load_external_task(path, metric, name, test_path=None, test_fraction=0.2):
    """Build a Task from tab-separated files.

    With one file, the trailing test_fraction of valid lines becomes the
    test split.  Raises if no valid samples remain.
    """
    samples, skipped = read_samples_tsv(path)
    if test_path is not None:
        test, more_skipped = read_samples_tsv(test_path)
        skipped = skipped + more_skipped
        train = samples
    else:
        if len(samples) < 2:
            raise ValueError(f"{path}: need at least 2 valid samples to split")
        n_test = max(1, int(round(len(samples) * test_fraction)))
        train, test = samples[:-n_test], samples[-n_test:]
    if not train or not test:
        raise ValueError(f"{path}: no valid samples for both splits")
    spec = TaskSpec(name=name, kind=EXTERNAL, metric=metric)
    return Task(spec=spec, train=train, test=test), skipped


def write_generated_dump(path, rows):
    """Write (sample, source_token) pairs as 4-field tab-separated lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample, source_token in rows:
            fh.write(
                "\t".join((sample.context, sample.question, sample.answer, source_token))
                + "\n"
            )


def read_generated_dump(path):
    """Read a dump written by write_generated_dump."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            rows.append((make_sample(parts[0], parts[1], parts[2]), parts[3]))
    return rows
