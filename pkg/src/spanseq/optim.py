"""AdamW with decoupled weight decay, global-norm clipping, LR schedule."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError


@dataclass
class AdamWState:
    """First/second moment estimates keyed by parameter name."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """One optimizer step over a dict of name -> Tensor parameters.

    Weight decay is decoupled: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    The whole step aborts before touching any parameter if a gradient is
    non-finite, so a poisoned batch cannot half-update the model.
    """
    if lr <= 0:
        raise ValueError(f"adamw_step: lr must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adamw_step: non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= np.asarray(lr * update, dtype=p.data.dtype)
    return params, state


def clip_global_norm(grads, max_norm=1.0):
    """Scale all gradients in place so the global l2 norm is at most max_norm.

    Returns (grads, pre_clip_norm). Idempotent: a second application after
    scaling leaves values unchanged up to one rescale at machine precision.
    """
    if max_norm <= 0:
        raise ValueError(f"clip_global_norm: max_norm must be positive, got {max_norm}")
    values = list(grads.values()) if isinstance(grads, dict) else list(grads)
    total = 0.0
    for g in values:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in values:
            g *= scale
    return grads, norm


def schedule_lr(step, total_steps, peak=1e-4, warmup_prop=0.1):
    """Piecewise-linear schedule: 0 -> peak over the warmup, then peak -> 0."""
    if not 0 < warmup_prop < 1:
        raise ValueError(f"schedule_lr: warmup_prop must be in (0, 1), got {warmup_prop}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"schedule_lr: step {step} outside [0, {total_steps}]")
    warm = warmup_prop * total_steps
    if step <= warm:
        return peak * step / warm
    return peak * (total_steps - step) / (total_steps - warm)
