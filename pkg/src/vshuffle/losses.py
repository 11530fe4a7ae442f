"""Value shuffling and the attention-distillation loss family.

Style taps are passed as ``style_taps[image][block]``; content and output
taps as ``taps[block]``, aligned on block order. Every target branch
(content queries, attention against style keys/values) is computed without
gradient, so only the output stream is optimized.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .features import AttentionTap, attention, concat_style_features
from .gradcore import l1_mean

AXES = ("h", "s", "d")
RESAMPLE_POLICIES = ("per-timestep", "per-inner-step")

# (image, block, draw, extent) -> permutation of range(extent)
PermutationSource = Callable[[int, int, int, int], np.ndarray]


@dataclass(frozen=True)
class ShuffleSpec:
    axis: str = "s"
    m: int = 1
    rng_seed: int = 0
    resample_policy: str = "per-timestep"
    identity: bool = False

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"shuffle axis must be one of {AXES}, got {self.axis!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.resample_policy not in RESAMPLE_POLICIES:
            raise ValueError(f"resample_policy must be one of {RESAMPLE_POLICIES}")


@dataclass(frozen=True)
class HsrSpec:
    alpha: float = 0.4
    window: tuple[float, float] = (0.2, 0.9)
    beta: float = 0.24

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        t1, t2 = self.window
        if not 0.0 <= t1 <= t2 <= 1.0:
            raise ValueError(f"window fractions must satisfy 0 <= t1 <= t2 <= 1, got {self.window}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    def in_window(self, t: int, T: int) -> bool:
        return self.window[0] * T <= t <= self.window[1] * T


def draw_permutation(extent: int, seed: int, *counters: int) -> np.ndarray:
    """Uniform permutation keyed by ``(seed, *counters)``; independent of call order."""
    rng = np.random.default_rng([seed, *counters])
    return rng.permutation(extent)


def spec_permutations(spec: ShuffleSpec, timestep: int, inner: int = 0) -> PermutationSource:
    inner_key = inner if spec.resample_policy == "per-inner-step" else 0

    def source(image: int, block: int, draw: int, extent: int) -> np.ndarray:
        if spec.identity:
            return np.arange(extent)
        return draw_permutation(extent, spec.rng_seed, timestep, block, draw, image, inner_key)

    return source


def _axis_extent(v: torch.Tensor, axis: str) -> int:
    return v.shape[{"h": -3, "s": -2, "d": -1}[axis]]


def shuffle_values(
    V: torch.Tensor,
    spec: ShuffleSpec,
    draw_index: int = 0,
    timestep: int = 0,
    block: int = 0,
    inner: int = 0,
    source: Optional[PermutationSource] = None,
) -> tuple[torch.Tensor, list[np.ndarray]]:
    """Permute ``V`` of shape ``(n, h, s, d)`` along ``spec.axis``, one permutation per image.

    For the token axis the same permutation is shared by every head of an
    image. Returns the shuffled tensor and the permutations used.
    """
    source = source or spec_permutations(spec, timestep, inner)
    extent = _axis_extent(V, spec.axis)
    outs, perms = [], []
    for i in range(V.shape[0]):
        perm = np.asarray(source(i, block, draw_index, extent), dtype=np.int64)
        idx = torch.from_numpy(perm)
        vi = V[i]
        if spec.axis == "s":
            vi = vi[:, idx, :]
        elif spec.axis == "h":
            vi = vi[idx]
        else:
            vi = vi[..., idx]
        outs.append(vi)
        perms.append(perm)
    return torch.stack(outs), perms


def _block_mean(terms: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack(list(terms)).mean()


def output_attention(tap: AttentionTap, tau: float) -> torch.Tensor:
    if tau == 1.0 and tap.out is not None:
        return tap.out
    return attention(tap.q, tap.k, tap.v, tau)


@dataclass
class Targets:
    """Gradient-free targets for one timestep, one entry per block."""

    blocks: list[int]
    q_content: list[torch.Tensor]
    unshuffled: list[torch.Tensor]
    shuffled: list[list[torch.Tensor]] = field(default_factory=list)  # [draw][block]
    degenerate: bool = False  # every draw was the identity on a single style image


def build_targets(
    taps_c: Sequence[AttentionTap],
    style_taps: Sequence[Sequence[AttentionTap]],
    tau: float,
    shuffle: Optional[ShuffleSpec] = None,
    timestep: int = 0,
    inner: int = 0,
    source: Optional[PermutationSource] = None,
    draws: Optional[Sequence[int]] = None,
    transcript: Optional[list] = None,
) -> Targets:
    """Precompute unshuffled (and, with ``shuffle``, shuffled) attention targets."""
    if not style_taps:
        raise ValueError("need at least one style image")
    n = len(style_taps)
    blocks = [tap.block_index for tap in taps_c]
    with torch.no_grad():
        q_c = [tap.q.detach() for tap in taps_c]
        per_block = [concat_style_features([style_taps[i][b] for i in range(n)]) for b in range(len(blocks))]
        unshuffled = [attention(q, k, v, tau) for q, (k, v) in zip(q_c, per_block)]
        targets = Targets(blocks, q_c, unshuffled)
        if shuffle is None:
            return targets
        source = source or spec_permutations(shuffle, timestep, inner)
        draws = list(range(shuffle.m)) if draws is None else list(draws)
        all_identity = True
        for draw in draws:
            row = []
            for b, block in enumerate(blocks):
                k_cat, _ = per_block[b]
                v_stack = torch.stack([style_taps[i][b].v.detach() for i in range(n)])
                v_sh, perms = shuffle_values(v_stack, shuffle, draw, timestep, block, inner, source)
                for i, p in enumerate(perms):
                    if not np.array_equal(p, np.arange(len(p))):
                        all_identity = False
                    if transcript is not None:
                        transcript.append(
                            {"t": timestep, "block": block, "draw": draw, "image": i, "inner": inner,
                             "axis": shuffle.axis, "perm": p.tolist()}
                        )
                # joint attention over the n*s concatenated keys/values
                v_cat = v_sh[0] if n == 1 else torch.cat(list(v_sh), dim=-2)
                row.append(attention(q_c[b], k_cat, v_cat, tau))
            targets.shuffled.append(row)
        targets.degenerate = all_identity and n == 1
    return targets


def content_term(taps_out: Sequence[AttentionTap], targets: Targets) -> torch.Tensor:
    return _block_mean([l1_mean(tap.q, q) for tap, q in zip(taps_out, targets.q_content)])


def style_term(taps_out: Sequence[AttentionTap], target: Sequence[torch.Tensor], tau: float) -> torch.Tensor:
    return _block_mean([l1_mean(output_attention(tap, tau), tg) for tap, tg in zip(taps_out, target)])


def shuffled_style_term(taps_out: Sequence[AttentionTap], targets: Targets, tau: float) -> torch.Tensor:
    if not targets.shuffled:
        raise ValueError("targets carry no shuffled draws")
    outs = [output_attention(tap, tau) for tap in taps_out]
    per_draw = [_block_mean([l1_mean(o, tg) for o, tg in zip(outs, row)]) for row in targets.shuffled]
    return torch.stack(per_draw).mean()


def ad_from_targets(taps_out, targets: Targets, beta: float, tau: float) -> torch.Tensor:
    return style_term(taps_out, targets.unshuffled, tau) + beta * content_term(taps_out, targets)


def vshuffle_from_targets(taps_out, targets: Targets, beta: float, tau: float) -> torch.Tensor:
    return shuffled_style_term(taps_out, targets, tau) + beta * content_term(taps_out, targets)


def hsr_from_targets(taps_out, targets: Targets, alpha: float, beta: float, tau: float, in_window: bool) -> torch.Tensor:
    if not in_window or alpha == 0.0 or targets.degenerate:
        return ad_from_targets(taps_out, targets, beta, tau)
    l_vs = vshuffle_from_targets(taps_out, targets, beta, tau)
    if alpha == 1.0:
        return l_vs
    return alpha * l_vs + (1.0 - alpha) * ad_from_targets(taps_out, targets, beta, tau)


# ---------------------------------------------------------------- public ops


def loss_content(q_cs: torch.Tensor, q_c: torch.Tensor) -> torch.Tensor:
    return l1_mean(q_cs, q_c.detach())


def loss_ad(taps_out, taps_c, style_taps, beta: float, tau: float = 1.0) -> torch.Tensor:
    """Style distillation plus ``beta`` times query matching, for a single style image."""
    if len(style_taps) != 1:
        raise ValueError(f"loss_ad takes exactly one style image, got {len(style_taps)}")
    return ad_from_targets(taps_out, build_targets(taps_c, style_taps, tau), beta, tau)


def loss_style_shuffled(
    taps_out,
    taps_c,
    style_taps,
    spec: ShuffleSpec,
    tau: float = 1.0,
    timestep: int = 0,
    inner: int = 0,
    source: Optional[PermutationSource] = None,
    draws: Optional[Sequence[int]] = None,
    transcript: Optional[list] = None,
) -> torch.Tensor:
    """Mean over ``m`` shuffle draws of the distance to the shuffled-value attention target."""
    targets = build_targets(taps_c, style_taps, tau, spec, timestep, inner, source, draws, transcript)
    return shuffled_style_term(taps_out, targets, tau)


def loss_vshuffle(taps_out, taps_c, style_taps, spec: ShuffleSpec, beta: float, tau: float = 1.0, **kw) -> torch.Tensor:
    targets = build_targets(taps_c, style_taps, tau, spec, **kw)
    return vshuffle_from_targets(taps_out, targets, beta, tau)


def loss_hsr(
    t: int,
    T: int,
    hsr: HsrSpec,
    shuffle: ShuffleSpec,
    taps_out,
    taps_c,
    style_taps,
    tau: float = 1.0,
    **kw,
) -> torch.Tensor:
    """Shuffled/unshuffled convex blend inside the window, plain distillation outside it."""
    inside = hsr.in_window(t, T)
    targets = build_targets(taps_c, style_taps, tau, shuffle if inside else None, timestep=t, **kw)
    return hsr_from_targets(taps_out, targets, hsr.alpha, hsr.beta, tau, inside)
