"""Whitespace word-level vocabulary with reserved control tokens.

Control tokens are rendered as dunder sentinels (`__ans__` style) so they
can never collide with lowercased corpus words; the five base specials own
ids 0..4 forever and task tokens are appended one id at a time.
"""

import re
from collections import Counter

PAD, UNK, ANS, EOS, GEN = "__pad__", "__unk__", "__ans__", "__eos__", "__gen__"
BASE_SPECIALS = (PAD, UNK, ANS, EOS, GEN)
PAD_ID, UNK_ID, ANS_ID, EOS_ID, GEN_ID = range(5)

RESERVED_PATTERN = re.compile(r"^__.*__$")
_TASK_NAME_PATTERN = re.compile(r"^[a-z0-9_]+$")


def task_token(name):
    return f"__{name}__"


def is_reserved_word(word):
    return bool(RESERVED_PATTERN.match(word))


class Vocabulary:
    """Token/id bimap. Ids are append-only: once assigned, never reused."""

    def __init__(self, words=()):
        self._id_to_token = list(BASE_SPECIALS)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        self.task_tokens = {}
        for word in words:
            self._append_word(word)

    def _append_word(self, word):
        if word in self._token_to_id:
            raise ValueError(f"duplicate vocabulary entry {word!r}")
        self._token_to_id[word] = len(self._id_to_token)
        self._id_to_token.append(word)

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def token_to_id(self, token):
        return self._token_to_id.get(token, UNK_ID)

    def id_to_token(self, idx):
        if not 0 <= idx < len(self._id_to_token):
            raise ValueError(f"id {idx} out of range for vocabulary of size {len(self)}")
        return self._id_to_token[idx]

    def encode(self, text):
        """Lowercase, split on whitespace, map unknown words to UNK."""
        return [self._token_to_id.get(w, UNK_ID) for w in text.lower().split()]

    def decode(self, ids):
        return " ".join(self.id_to_token(i) for i in ids)

    def add_task_token(self, name):
        """Register __<name>__ with the next free id and return that id."""
        name = name.lower()
        if not _TASK_NAME_PATTERN.match(name):
            raise ValueError(f"task name {name!r} must match [a-z0-9_]+")
        token = task_token(name)
        if token in BASE_SPECIALS:
            raise ValueError(f"task name {name!r} collides with a base special")
        if token in self._token_to_id:
            raise ValueError(f"task token for {name!r} already registered")
        new_id = len(self._id_to_token)
        self._append_word(token)
        self.task_tokens[name] = new_id
        return new_id

    def generation_token_ids(self):
        """Ids usable as the leading token of an LM-format sequence."""
        return {GEN_ID, *self.task_tokens.values()}

    def special_ids(self):
        return {PAD_ID, UNK_ID, ANS_ID, EOS_ID, GEN_ID, *self.task_tokens.values()}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tokens[: len(BASE_SPECIALS)] != list(BASE_SPECIALS):
            raise ValueError(f"{path}: vocabulary file does not start with base specials")
        vocab = cls()
        for token in tokens[len(BASE_SPECIALS) :]:
            if is_reserved_word(token):
                name = token[2:-2]
                vocab._append_word(token)
                vocab.task_tokens[name] = len(vocab) - 1
            else:
                vocab._append_word(token)
        return vocab


def build_vocabulary(corpus, min_count=1):
    """Count lowercased words across an iterable of texts and keep those
    occurring at least min_count times, ordered by frequency then alphabet.

    Words in the reserved dunder namespace never become entries.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for text in corpus:
        for word in text.lower().split():
            if not is_reserved_word(word):
                counts[word] += 1
    if not counts:
        raise ValueError("empty corpus: no usable words to build a vocabulary from")
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(kept)
