"""Reverse-mode automatic differentiation on dense float64 arrays.

A linear tape records every forward operation; backward() replays it in
reverse and accumulates gradients into the participating tensors.  All
buffers are row-major float64 and every op output is checked for NaN/Inf,
which is treated as a hard failure rather than a warning.
"""

import struct
from contextlib import contextmanager

import numpy as np

GELU_COEF = 0.044715
MASK_FILL = -1e9


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the attempted operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced (or was handed) NaN or Inf values."""


class TapeError(RuntimeError):
    """backward() called in a state the tape cannot serve."""


class Tensor:
    """Dense float64 array plus gradient slot.

    data is always C-contiguous; grad reads as zeros for tensors that
    require a gradient but never received one.
    """

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.data) if self.requires_grad else None
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


class _Record:
    __slots__ = ("op", "inputs", "output", "rule")

    def __init__(self, op, inputs, output, rule):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.rule = rule


class ComputationTape:
    """Ordered list of recorded operations; creation order is a valid
    topological order, so one reversed sweep is a full backward pass."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __len__(self):
        return len(self.records)


_tape = ComputationTape()
_grad_enabled = True


def active_tape():
    return _tape


def reset_tape():
    """Discard recorded history and allow a fresh backward pass."""
    global _tape
    _tape = ComputationTape()
    return _tape


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _finish(op, out_data, inputs, rule):
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values in output of op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.requires_grad = False
    out._grad = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.records.append(_Record(op, inputs, out, rule))
    return out


def _as_tensor(x, op):
    if isinstance(x, Tensor):
        return x
    try:
        return constant(x)
    except NonFiniteError:
        raise NonFiniteError(f"non-finite operand passed to op '{op}'")


def unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a = _as_tensor(a, "add")
    b = _as_tensor(b, "add")
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _finish("add", out, (a, b), rule)


def mul(a, b):
    a = _as_tensor(a, "mul")
    b = _as_tensor(b, "mul")
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    a_data, b_data = a.data, b.data

    def rule(g):
        return unbroadcast(g * b_data, a.shape), unbroadcast(g * a_data, b.shape)

    return _finish("mul", out, (a, b), rule)


def matmul(a, b):
    a = _as_tensor(a, "matmul")
    b = _as_tensor(b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(
            f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    a_data, b_data = a.data, b.data

    def rule(g):
        ga = g @ b_data.swapaxes(-1, -2)
        gb = a_data.swapaxes(-1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _finish("matmul", out, (a, b), rule)


def reshape(x, shape):
    x = _as_tensor(x, "reshape")
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    old_shape = x.shape

    def rule(g):
        return (g.reshape(old_shape),)

    return _finish("reshape", out, (x,), rule)


def transpose(x, axes):
    x = _as_tensor(x, "transpose")
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} invalid for shape {x.shape}")
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (g.transpose(inverse),)

    return _finish("transpose", out, (x,), rule)


def embedding_lookup(table, ids):
    """Gather rows of `table` (V, d) at integer positions `ids`."""
    table = _as_tensor(table, "embedding_lookup")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding_lookup: ids must be integers")
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup: table must be 2-d, got {table.shape}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeMismatch(
            f"embedding_lookup: id out of range for table with {vocab} rows"
        )
    out = table.data[ids]
    shape = table.shape

    def rule(g):
        gt = np.zeros(shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _finish("embedding_lookup", out, (table,), rule)


def softmax(x):
    """Numerically stabilized softmax over the last axis."""
    x = _as_tensor(x, "softmax")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    probs = out

    def rule(g):
        dot = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - dot),)

    return _finish("softmax", out, (x,), rule)


def layer_norm(x, gain, bias, eps=1e-9):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x, "layer_norm")
    gain = _as_tensor(gain, "layer_norm")
    bias = _as_tensor(bias, "layer_norm")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain/bias must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    gain_data = gain.data

    def rule(g):
        dxhat = g * gain_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx, dgain, dbias

    return _finish("layer_norm", out, (x, gain, bias), rule)


def gelu(x):
    """tanh-approximated gaussian error linear unit."""
    x = _as_tensor(x, "gelu")
    c = np.sqrt(2.0 / np.pi)
    u = c * (x.data + GELU_COEF * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)
    x_data = x.data

    def rule(g):
        du = c * (1.0 + 3.0 * GELU_COEF * x_data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x_data * (1.0 - t * t) * du
        return (g * local,)

    return _finish("gelu", out, (x,), rule)


def causal_mask(scores):
    """Add a large negative constant above the diagonal of the last two axes
    so that softmax assigns exactly zero weight to future positions."""
    scores = _as_tensor(scores, "causal_mask")
    if scores.data.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ShapeMismatch(
            f"causal_mask: last two axes must be square, got {scores.shape}"
        )
    t = scores.shape[-1]
    bias = np.triu(np.full((t, t), MASK_FILL), k=1)
    out = scores.data + bias

    def rule(g):
        return (g,)

    return _finish("causal_mask", out, (scores,), rule)


def masked_cross_entropy(logits, targets, mask):
    """Mean next-token cross-entropy over the positions selected by `mask`.

    logits: (..., V); targets/mask: matching leading shape.  Entries of
    `targets` at unselected positions are ignored but must be valid ids.
    """
    logits = _as_tensor(logits, "masked_cross_entropy")
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise ShapeMismatch(
            f"masked_cross_entropy: logits {logits.shape} need targets/mask "
            f"of shape {lead}, got {targets.shape} and {mask.shape}"
        )
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeMismatch("masked_cross_entropy: targets must be integers")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeMismatch(
            f"masked_cross_entropy: target id out of range for vocab {vocab}"
        )
    n = int(mask.sum())
    if n == 0:
        raise ShapeMismatch("masked_cross_entropy: mask selects no positions")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(z)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = -(picked * mask).sum() / n
    probs = e / z

    def rule(g):
        gl = probs.copy()
        flat = gl.reshape(-1, vocab)
        idx = np.arange(flat.shape[0])
        flat[idx, targets.reshape(-1)] -= 1.0
        gl *= mask[..., None] / n
        return (gl * g,)

    return _finish("masked_cross_entropy", out, (logits,), rule)


def sum_all(x):
    x = _as_tensor(x, "sum_all")
    out = x.data.sum()
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(g, shape).astype(np.float64),)

    return _finish("sum_all", out, (x,), rule)


def backward(loss):
    """Propagate d(loss)/d(tensor) to every tensor the loss depends on.

    loss must be a scalar produced by taped operations; a second call
    without reset_tape() is an error.
    """
    tape = _tape
    if tape.consumed:
        raise TapeError("backward already ran on this tape; call reset_tape() first")
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise TapeError("loss was not produced by operations recorded on this tape")

    loss._grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g_out = rec.output._grad
        if g_out is None:
            continue
        grads = rec.rule(g_out)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t._grad is None:
                t._grad = g.astype(np.float64, copy=True)
            else:
                t._grad = t._grad + g
    tape.consumed = True


def finite_difference_check(f, params, epsilon=1e-5, max_checks_per_param=None):
    """Compare analytic gradients of the scalar f() against central differences.

    Returns the max over checked parameter entries of
    |analytic - central| / (|analytic| + |central| + 1e-12).
    max_checks_per_param limits entries per tensor via a deterministic
    evenly-spaced stride (None checks every entry).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = list(params)
    reset_tape()
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.array(p.grad, copy=True) for p in params]
    reset_tape()

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            n = flat.size
            if max_checks_per_param is not None and n > max_checks_per_param:
                idxs = np.unique(
                    np.round(np.linspace(0, n - 1, max_checks_per_param)).astype(int)
                )
            else:
                idxs = range(n)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = f().item()
                flat[i] = orig - epsilon
                lo = f().item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NonFiniteError(
                        "finite_difference_check: non-finite loss at perturbed point"
                    )
                central = (hi - lo) / (2.0 * epsilon)
                a = ana_flat[i]
                disc = abs(a - central) / (abs(a) + abs(central) + 1e-12)
                if disc > worst:
                    worst = disc
    return worst


TENSOR_FILE_MAGIC = b"LFG.TENS"
TENSOR_FILE_VERSION = 1


def save_tensors(path, named):
    """Write named arrays to a flat binary file.

    Layout: magic, u32 version, u32 count, then per tensor u32 name length,
    utf-8 name, u32 rank, u32 dims, raw little-endian float64 values.
    """
    with open(path, "wb") as fh:
        fh.write(TENSOR_FILE_MAGIC)
        fh.write(struct.pack("<II", TENSOR_FILE_VERSION, len(named)))
        for name, value in named.items():
            # asarray keeps rank-0 inputs rank 0; tobytes handles layout
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_tensors(path):
    """Read a file written by save_tensors back into {name: ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != TENSOR_FILE_MAGIC:
        raise ValueError(f"{path}: bad magic, not a tensor file")
    (version, count) = struct.unpack_from("<II", blob, 8)
    if version != TENSOR_FILE_VERSION:
        raise ValueError(f"{path}: unsupported tensor file version {version}")
    offset = 16
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
            offset += 8 * n
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt tensor file") from exc
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return out
