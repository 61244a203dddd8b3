"""Adam with bias correction, operating in place on parameter tensors."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatch, Tensor


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0


def init_adam_state(params):
    params = list(params)
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-4):
    """One bias-corrected Adam update; mutates params and state, returns state."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"state for {len(state.m)}"
        )
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"adam_step: grad {i} has shape {g.shape}, param has {p.data.shape}"
            )
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def resize_adam_state(state, params):
    """Grow moment buffers after a parameter gained rows (new vocab entries).

    New entries start with zero moments; existing entries keep theirs.
    """
    params = list(params)
    if len(params) != len(state.m):
        raise ShapeMismatch(
            f"resize_adam_state: state tracks {len(state.m)} params, got {len(params)}"
        )
    for i, p in enumerate(params):
        old = state.m[i]
        if old.shape == p.data.shape:
            continue
        if old.shape[1:] != p.data.shape[1:] or old.shape[0] > p.data.shape[0]:
            raise ShapeMismatch(
                f"resize_adam_state: cannot grow {old.shape} to {p.data.shape}"
            )
        for buffers in (state.m, state.v):
            grown = np.zeros_like(p.data)
            grown[: old.shape[0]] = buffers[i]
            buffers[i] = grown
    return state


def collect_grads(params):
    """Gradient list aligned with params; unused parameters yield zeros."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
