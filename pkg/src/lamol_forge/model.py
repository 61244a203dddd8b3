"""Small causal transformer language model built on the autodiff core.

The output projection shares storage with the token embedding, so growing
the vocabulary grows both at once.  Everything is float64 and seeded, and
identical calls reproduce identical bits.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import vocab as vb
from .autodiff import Tensor

INIT_STD = 0.02
GROW_NOISE_STD = 0.01


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 2
    width: int = 64
    heads: int = 4
    ff_width: int = 256
    max_len: int = 128

    def __post_init__(self):
        for name in ("vocab_size", "layers", "width", "heads", "ff_width", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.width % self.heads:
            raise ValueError(
                f"width {self.width} not divisible by heads {self.heads}"
            )


class LanguageModel:
    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)

        def weight(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        d, ff = config.width, config.ff_width
        self.wte = weight(config.vocab_size, d)
        self.wpe = weight(config.max_len, d)
        self.blocks = []
        for _ in range(config.layers):
            self.blocks.append(
                {
                    "ln1_g": ones(d), "ln1_b": zeros(d),
                    "wq": weight(d, d), "bq": zeros(d),
                    "wk": weight(d, d), "bk": zeros(d),
                    "wv": weight(d, d), "bv": zeros(d),
                    "wo": weight(d, d), "bo": zeros(d),
                    "ln2_g": ones(d), "ln2_b": zeros(d),
                    "w1": weight(d, ff), "b1": zeros(ff),
                    "w2": weight(ff, d), "b2": zeros(d),
                }
            )
        self.lnf_g = ones(d)
        self.lnf_b = zeros(d)

    def parameters(self):
        """Named parameters in a stable order; the tied output projection
        appears once, as the token embedding."""
        named = {"wte": self.wte, "wpe": self.wpe}
        for i, block in enumerate(self.blocks):
            for key, value in block.items():
                named[f"h{i}.{key}"] = value
        named["lnf_g"] = self.lnf_g
        named["lnf_b"] = self.lnf_b
        return named

    def parameter_list(self):
        return list(self.parameters().values())

    def forward(self, ids):
        """ids (B, T) int -> logits Tensor (B, T, vocab)."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ad.ShapeMismatch(f"forward expects (batch, time) ids, got {ids.shape}")
        b, t = ids.shape
        cfg = self.config
        if t > cfg.max_len:
            raise ad.ShapeMismatch(
                f"sequence length {t} exceeds max_len {cfg.max_len}; truncate upstream"
            )
        if t == 0:
            raise ad.ShapeMismatch("forward got an empty sequence")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ad.ShapeMismatch(
                f"token id out of range for vocab of size {cfg.vocab_size}"
            )
        heads = cfg.heads
        dh = cfg.width // heads
        scale = ad.constant(1.0 / np.sqrt(dh))
        pos = np.arange(t).reshape(1, t)

        x = ad.add(ad.embedding_lookup(self.wte, ids), ad.embedding_lookup(self.wpe, pos))
        for blk in self.blocks:
            h = ad.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            q = ad.add(ad.matmul(h, blk["wq"]), blk["bq"])
            k = ad.add(ad.matmul(h, blk["wk"]), blk["bk"])
            v = ad.add(ad.matmul(h, blk["wv"]), blk["bv"])
            q = ad.transpose(ad.reshape(q, (b, t, heads, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (b, t, heads, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (b, t, heads, dh)), (0, 2, 1, 3))
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            att = ad.softmax(ad.causal_mask(scores))
            ctx = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3))
            ctx = ad.reshape(ctx, (b, t, cfg.width))
            proj = ad.add(ad.matmul(ctx, blk["wo"]), blk["bo"])
            x = ad.add(x, proj)
            h2 = ad.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, blk["w1"]), blk["b1"])), blk["w2"]), blk["b2"])
            x = ad.add(x, ff)
        h = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        return ad.matmul(h, ad.transpose(self.wte, (1, 0)))


def _shift_for_prediction(tokens, loss_mask):
    """(tokens, per-token loss mask) -> (targets, mask) aligned to logits,
    where a masked token is predicted from the logits one step earlier."""
    t = len(tokens)
    targets = np.zeros(t, dtype=np.int64)
    mask = np.zeros(t, dtype=bool)
    for p in range(t - 1):
        targets[p] = tokens[p + 1]
        mask[p] = loss_mask[p + 1]
    return targets, mask


def sequence_loss(model, token_rows, mask_rows):
    """Mean next-token cross-entropy over the masked positions of a batch.

    token_rows / mask_rows are equal-length lists; rows are right-padded
    with PAD, and padded positions never contribute to the loss.
    """
    if not token_rows:
        raise ValueError("sequence_loss got an empty batch")
    b = len(token_rows)
    t = max(len(r) for r in token_rows)
    ids = np.full((b, t), vb.PAD_ID, dtype=np.int64)
    targets = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i, (row, row_mask) in enumerate(zip(token_rows, mask_rows)):
        ids[i, : len(row)] = row
        tg, mk = _shift_for_prediction(list(row), list(row_mask))
        targets[i, : len(row)] = tg
        mask[i, : len(row)] = mk
    logits = model.forward(ids)
    return ad.masked_cross_entropy(logits, targets, mask)


def qa_loss(model, tokens, loss_mask):
    """Loss on the answering shape: only answer and EOS positions count."""
    tokens = list(tokens)
    loss_mask = list(loss_mask)
    if len(tokens) != len(loss_mask):
        raise ValueError(
            f"tokens ({len(tokens)}) and loss_mask ({len(loss_mask)}) differ in length"
        )
    if not any(loss_mask):
        raise ValueError("loss_mask selects no positions")
    if loss_mask[0]:
        raise ValueError("position 0 has no left context and cannot carry loss")
    return sequence_loss(model, [tokens], [loss_mask])


def lm_loss(model, tokens):
    """Loss on the generation shape: every position after the first counts."""
    tokens = list(tokens)
    if len(tokens) < 2:
        raise ValueError(f"generation shape needs at least 2 tokens, got {len(tokens)}")
    mask = [False] + [True] * (len(tokens) - 1)
    return sequence_loss(model, [tokens], [mask])


def combined_loss(qa, lm, lm_weight):
    if lm_weight < 0:
        raise ValueError(f"lm_weight must be non-negative, got {lm_weight}")
    return ad.add(qa, ad.mul(lm, ad.constant(float(lm_weight))))


def _last_logits(model, ids_batch):
    with ad.no_grad():
        out = model.forward(np.asarray(ids_batch, dtype=np.int64))
    return out.data[:, -1, :]


def greedy_decode(model, prefix_ids, max_new_tokens, eos_id=vb.EOS_ID):
    """Continue prefix_ids by argmax (ties to the lowest id) until EOS or
    the budget runs out; returns only the continuation, EOS included."""
    prefix = list(prefix_ids)
    if not prefix:
        raise ValueError("greedy_decode needs a non-empty prefix")
    budget = min(max_new_tokens, model.config.max_len - len(prefix))
    out = []
    for _ in range(budget):
        nxt = int(np.argmax(_last_logits(model, [prefix])[0]))
        out.append(nxt)
        prefix.append(nxt)
        if nxt == eos_id:
            break
    return out


def greedy_decode_batch(model, prefixes, max_new_tokens, eos_id=vb.EOS_ID):
    """Greedy-decode many prefixes, batching those of equal length.

    Row-independent attention makes this equivalent to decoding each
    prefix alone; returns continuations aligned with the input order.
    """
    results = [None] * len(prefixes)
    groups = {}
    for i, p in enumerate(prefixes):
        if not p:
            raise ValueError("greedy_decode_batch needs non-empty prefixes")
        groups.setdefault(len(p), []).append(i)
    for length in sorted(groups):
        rows = groups[length]
        seqs = [list(prefixes[i]) for i in rows]
        done = [False] * len(rows)
        outs = [[] for _ in rows]
        budget = min(max_new_tokens, model.config.max_len - length)
        for _ in range(budget):
            if all(done):
                break
            logits = _last_logits(model, seqs)
            for j in range(len(rows)):
                if done[j]:
                    seqs[j].append(vb.PAD_ID)
                    continue
                nxt = int(np.argmax(logits[j]))
                outs[j].append(nxt)
                seqs[j].append(nxt)
                if nxt == eos_id:
                    done[j] = True
        for j, i in enumerate(rows):
            results[i] = outs[j]
    return results


def sample_top_k(model, prefix_ids, k, max_new_tokens, rng, eos_id=vb.EOS_ID):
    """Sample a continuation from the renormalized top-k distribution at
    each step, stopping at EOS or the token budget."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    prefix = list(prefix_ids)
    if not prefix:
        raise ValueError("sample_top_k needs a non-empty prefix")
    vocab_size = model.config.vocab_size
    k = min(k, vocab_size)
    budget = min(max_new_tokens, model.config.max_len - len(prefix))
    out = []
    for _ in range(budget):
        logits = _last_logits(model, [prefix])[0]
        order = np.lexsort((np.arange(vocab_size), -logits))
        top = order[:k]
        shifted = logits[top] - logits[top].max()
        probs = np.exp(shifted)
        probs /= probs.sum()
        draw = rng.random()
        pick = int(np.searchsorted(np.cumsum(probs), draw, side="right"))
        nxt = int(top[min(pick, k - 1)])
        out.append(nxt)
        prefix.append(nxt)
        if nxt == eos_id:
            break
    return out


def grow_embeddings(model, new_vocab_size, rng=None):
    """Append embedding rows for new vocabulary entries.

    New rows start at the mean of the existing rows plus small noise; old
    rows (and therefore all old-vocabulary logits) are untouched.  The tied
    output projection grows with the embedding automatically.
    """
    old = model.config.vocab_size
    if new_vocab_size <= old:
        raise ValueError(
            f"new vocab size {new_vocab_size} must exceed current size {old}"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    extra = new_vocab_size - old
    mean = model.wte.data.mean(axis=0)
    rows = mean + rng.normal(0.0, GROW_NOISE_STD, size=(extra, model.config.width))
    model.wte.data = np.ascontiguousarray(np.vstack([model.wte.data, rows]))
    model.wte.zero_grad()
    model.config = replace(model.config, vocab_size=new_vocab_size)
    return model


META_KEYS = ("vocab_size", "layers", "width", "heads", "ff_width", "max_len")


def save_checkpoint(model, path, task_tokens=()):
    """Write weights to `path` and a key=value sidecar to `path + '.meta'`."""
    ad.save_tensors(path, model.parameters())
    with open(str(path) + ".meta", "w", encoding="utf-8") as fh:
        for key in META_KEYS:
            fh.write(f"{key}={getattr(model.config, key)}\n")
        fh.write("task_tokens=" + ",".join(task_tokens) + "\n")


def load_checkpoint(path):
    """Rebuild a model from save_checkpoint output; returns (model, task_tokens)."""
    meta = {}
    with open(str(path) + ".meta", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                meta[key] = value
    config = ModelConfig(**{k: int(meta[k]) for k in META_KEYS})
    model = LanguageModel(config, seed=0)
    tensors = load_tensors_checked(path, model)
    for name, param in model.parameters().items():
        param.data = np.ascontiguousarray(tensors[name])
    task_tokens = tuple(t for t in meta.get("task_tokens", "").split(",") if t)
    return model, task_tokens


def load_tensors_checked(path, model):
    tensors = ad.load_tensors(path)
    for name, param in model.parameters().items():
        if name not in tensors:
            raise ValueError(f"{path}: checkpoint is missing tensor {name!r}")
        if tensors[name].shape != param.data.shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {param.data.shape}"
            )
    return tensors
