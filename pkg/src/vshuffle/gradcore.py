"""Differentiable numeric core.

Tensors are ``torch.Tensor`` and the gradient tape is torch's autograd graph.
This module pins down the small set of primitives the rest of the package is
allowed to lean on (batched matmul, last-axis softmax, mean absolute error,
scalar backward, Adam) together with a central finite-difference oracle that
is deliberately independent of autograd.

Production code runs in float32, verification code in float64.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

PRODUCTION_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition on how an op may be called was violated."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf reached an op boundary."""


class NonFiniteGradientWarning(RuntimeWarning):
    pass


def check_finite(x: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def tensor(data, dtype: torch.dtype = PRODUCTION_DTYPE, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    check_finite(t, "tensor()")
    if any(n == 0 for n in t.shape):
        raise DimensionError(f"extents must be positive, got {tuple(t.shape)}")
    t.requires_grad_(requires_grad)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched contraction ``(..., p, q) x (..., q, r) -> (..., p, r)``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise DimensionError(f"matmul batch extents not broadcastable: {tuple(a.shape)} x {tuple(b.shape)}") from None
    return torch.matmul(a, b)


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    # torch.softmax subtracts the row max before exponentiating
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got {tuple(x.shape)}")
    return torch.softmax(x, dim=-1)


def l1_mean(a: torch.Tensor, b) -> torch.Tensor:
    """Mean absolute difference over all elements.

    ``b`` may be a python scalar, in which case it is broadcast. The
    derivative of ``|x|`` at 0 is taken to be 0.
    """
    if not isinstance(b, torch.Tensor):
        b = torch.full_like(a, float(b))
    if a.shape != b.shape:
        raise DimensionError(f"l1_mean shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def backward(loss: torch.Tensor, leaves: Optional[Sequence[torch.Tensor]] = None) -> None:
    """Populate ``.grad`` on leaves reachable from a scalar ``loss``.

    When ``leaves`` is given, exactly those tensors receive a gradient and
    unreachable ones get zeros. Without it, torch's accumulation semantics
    apply to every reachable leaf.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a live tape")
    check_finite(loss.detach(), "loss")
    if leaves is None:
        loss.reshape(()).backward()
        return
    leaves = list(leaves)
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    for leaf, g in zip(leaves, grads):
        leaf.grad = torch.zeros_like(leaf) if g is None else g.detach()


def grad_of(loss_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Reverse-mode gradient of a scalar function at ``x`` (no side effects on ``x``)."""
    leaf = x.detach().clone().requires_grad_(True)
    loss = loss_fn(leaf)
    backward(loss, [leaf])
    return leaf.grad


def finite_diff_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient, one coordinate at a time, in float64."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    base = x.detach().to(VERIFY_DTYPE).clone()
    flat = base.reshape(-1)
    out = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(base))
            flat[i] = orig - h
            fm = float(f(base))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is non-finite near coordinate {i}")
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def relative_linf(approx: torch.Tensor, reference: torch.Tensor) -> float:
    num = (approx.detach().to(VERIFY_DTYPE) - reference.to(VERIFY_DTYPE)).abs().max().item()
    den = reference.abs().max().item()
    return num / den if den > 0 else num


@dataclass(frozen=True)
class AdamState:
    m: torch.Tensor
    v: torch.Tensor

    @classmethod
    def zeros_like(cls, params: torch.Tensor) -> "AdamState":
        return cls(torch.zeros_like(params), torch.zeros_like(params))


def adam_step(
    params: torch.Tensor,
    grads: torch.Tensor,
    state: AdamState,
    lr: float,
    step_index: int,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam update; returns new tensors and leaves inputs untouched.

    ``step_index`` counts from 1. Non-finite gradients skip the update and
    emit a :class:`NonFiniteGradientWarning`.
    """
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    if step_index < 1:
        raise ContractError("step_index counts from 1")
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise DimensionError(
            f"adam shapes disagree: params {tuple(params.shape)}, grads {tuple(grads.shape)}, "
            f"m {tuple(state.m.shape)}, v {tuple(state.v.shape)}"
        )
    if not bool(torch.isfinite(grads).all()):
        warnings.warn(f"non-finite gradient at Adam step {step_index}; update skipped", NonFiniteGradientWarning)
        return params, state
    b1, b2 = betas
    with torch.no_grad():
        m = b1 * state.m + (1 - b1) * grads
        v = b2 * state.v + (1 - b2) * grads * grads
        m_hat = m / (1 - b1**step_index)
        v_hat = v / (1 - b2**step_index)
        new = params.detach() - lr * m_hat / (v_hat.sqrt() + eps)
    return new, AdamState(m, v)


def adam_step_all(
    params: Iterable[torch.Tensor],
    grads: Iterable[torch.Tensor],
    states: Sequence[AdamState],
    lr: float,
    step_index: int,
) -> tuple[list[torch.Tensor], list[AdamState]]:
    new_params, new_states = [], []
    for p, g, s in zip(params, grads, states):
        np_, ns = adam_step(p, g, s, lr, step_index)
        new_params.append(np_)
        new_states.append(ns)
    return new_params, new_states
