"""Attention math on extracted (Q, K, V) features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import torch

from . import container
from .gradcore import ContractError, DimensionError, matmul, softmax_lastdim

ADAIN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionTap:
    """(Q, K, V) of one self-attention block for one image at one timestep.

    Each of ``q``, ``k``, ``v`` is shaped ``(h, s, d)``; ``out`` is the
    block's native attention output with the same shape. ``grid`` is the
    ``(H', W')`` spatial layout of the ``s`` tokens.
    """

    block_index: int
    timestep: int
    stream: str
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    out: Optional[torch.Tensor] = None
    grid: tuple[int, int] = (0, 0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.v.shape)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """``softmax(tau * Q K^T / sqrt(d)) V`` per head.

    Shapes ``(..., h, s_q, d)``, ``(..., h, s_k, d)``, ``(..., h, s_k, d_v)``.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention head dim must be positive")
    if k.shape[-1] != d or q.shape[-3] != k.shape[-3] or k.shape[-3] != v.shape[-3]:
        raise DimensionError(
            f"attention head/dim mismatch: Q {tuple(q.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"K and V token counts differ: {tuple(k.shape)} vs {tuple(v.shape)}")
    logits = matmul(q * (tau / math.sqrt(d)), k.transpose(-1, -2))
    return matmul(softmax_lastdim(logits), v)


def blend_queries(q_content: torch.Tensor, q_output: torch.Tensor, gamma: float) -> torch.Tensor:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if q_content.shape != q_output.shape:
        raise DimensionError(f"query shapes differ: {tuple(q_content.shape)} vs {tuple(q_output.shape)}")
    if gamma == 1.0:
        return q_content
    if gamma == 0.0:
        return q_output
    return gamma * q_content + (1.0 - gamma) * q_output


def adain(x: torch.Tensor, y: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Renormalize each channel of ``x`` (axis 0) to the mean/std of ``y``'s.

    Uses population statistics and ``sigma_y * (x - mu_x) / (sigma_x + eps) + mu_y``.
    """
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"channel counts differ: {x.shape[0]} vs {y.shape[0]}")
    xf = x.reshape(x.shape[0], -1)
    yf = y.reshape(y.shape[0], -1)
    mu_x = xf.mean(1, keepdim=True)
    mu_y = yf.mean(1, keepdim=True)
    sd_x = xf.std(1, unbiased=False, keepdim=True)
    sd_y = yf.std(1, unbiased=False, keepdim=True)
    out = sd_y * (xf - mu_x) / (sd_x + eps) + mu_y
    return out.reshape(x.shape)


def concat_style_features(taps: list[AttentionTap]) -> tuple[torch.Tensor, torch.Tensor]:
    """Join K and V of several style images along the token axis, in list order."""
    if not taps:
        raise ValueError("need at least one style tap")
    shape = taps[0].shape
    for tap in taps[1:]:
        if tap.shape != shape or tuple(tap.k.shape) != tuple(taps[0].k.shape):
            raise DimensionError(f"heterogeneous style taps: {shape} vs {tap.shape}")
    if len(taps) == 1:
        return taps[0].k, taps[0].v
    return torch.cat([t.k for t in taps], dim=-2), torch.cat([t.v for t in taps], dim=-2)


@dataclass
class FeatureCache:
    """Taps keyed by ``(stream, timestep, block)``.

    Streams are ``"content"``, ``"output"`` and ``"style0"``, ``"style1"``, ...
    """

    taps: dict[tuple[str, int, int], AttentionTap] = field(default_factory=dict)

    def add(self, tap: AttentionTap) -> None:
        self.taps[(tap.stream, tap.timestep, tap.block_index)] = tap

    def get(self, stream: str, t: int, block: int) -> AttentionTap:
        try:
            return self.taps[(stream, t, block)]
        except KeyError:
            raise KeyError(f"no tap for stream={stream!r} t={t} block={block}") from None

    @property
    def n(self) -> int:
        return len({s for s, _, _ in self.taps if s.startswith("style")})

    def style_taps(self, t: int, block: int) -> list[AttentionTap]:
        taps = [self.get(f"style{i}", t, block) for i in range(self.n)]
        shape = taps[0].shape if taps else None
        if any(tap.shape != shape for tap in taps):
            raise DimensionError("style streams disagree on (h, s, d)")
        return taps

    def timesteps(self) -> list[int]:
        return sorted({t for _, t, _ in self.taps})

    def blocks(self) -> list[int]:
        return sorted({b for _, _, b in self.taps})

    def __iter__(self) -> Iterator[AttentionTap]:
        return iter(self.taps.values())

    def __len__(self) -> int:
        return len(self.taps)


def save_feature_cache(cache: FeatureCache, path) -> None:
    index, tensors = [], {}
    for j, tap in enumerate(cache):
        index.append({"stream": tap.stream, "t": tap.timestep, "block": tap.block_index, "grid": list(tap.grid)})
        for name in ("q", "k", "v", "out"):
            val = getattr(tap, name)
            if val is not None:
                tensors[f"{j}.{name}"] = val
    container.save(path, "FEAT", {"taps": index}, tensors)


def load_feature_cache(path) -> FeatureCache:
    header, tensors = container.load(path, kind="FEAT")
    cache = FeatureCache()
    for j, entry in enumerate(header["meta"]["taps"]):
        cache.add(
            AttentionTap(
                entry["block"], entry["t"], entry["stream"],
                tensors[f"{j}.q"], tensors[f"{j}.k"], tensors[f"{j}.v"], tensors.get(f"{j}.out"),
                tuple(entry["grid"]),
            )
        )
    return cache
