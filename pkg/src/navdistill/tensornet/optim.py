"""Adam, global-norm clipping, EMA tracking and linear learning-rate decay."""

from __future__ import annotations

import math

import numpy as np

from navdistill.tensornet.layers import Module, ParamSet


class OptimizerError(RuntimeError):
    pass


def global_grad_norm(params: ParamSet) -> float:
    total = 0.0
    for name, p in params:
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def adam_step(params: ParamSet, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              max_grad_norm: float = math.inf) -> float:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    Returns the pre-clipping global gradient norm.
    """
    norm = global_grad_norm(params)
    scale = 1.0
    if math.isfinite(max_grad_norm) and norm > max_grad_norm:
        scale = max_grad_norm / (norm + 1e-6)
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params:
        g = p.grad if scale == 1.0 else p.grad * scale
        g = g.astype(p.dtype, copy=False)
        if name not in params.m:
            params.m[name] = np.zeros_like(p.data)
            params.v[name] = np.zeros_like(p.data)
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if lr != 0.0:
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        p.grad = None
    return norm


def ema_update(target: Module | ParamSet, source: Module | ParamSet, momentum: float) -> None:
    """``target <- m * target + (1 - m) * source`` elementwise; ``source`` is only read."""
    tp = list(target.named_parameters()) if isinstance(target, Module) else list(target)
    sp = list(source.named_parameters()) if isinstance(source, Module) else list(source)
    if [n for n, _ in tp] != [n for n, _ in sp] or any(a.shape != b.shape for (_, a), (_, b) in zip(tp, sp)):
        raise ValueError("ema_update: parameter structures differ")
    for (_, t), (_, s) in zip(tp, sp):
        if momentum == 1.0:
            continue
        t.data = (momentum * t.data + (1.0 - momentum) * s.data).astype(t.dtype, copy=False)


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay from ``lr0`` at step 0 to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    step = min(max(step, 0), total_steps)
    return lr0 * (1.0 - step / total_steps)
