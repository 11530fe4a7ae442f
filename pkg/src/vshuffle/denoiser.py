"""Micro attention-UNet noise predictor with tappable self-attention blocks."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .features import AttentionTap, attention
from .gradcore import AdamState, NonFiniteError, adam_step, check_finite

MIN_ATTENTION_BLOCKS = 16


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    base_width: int = 32
    num_attention_blocks: int = 16
    attention_heads: int = 4
    head_dim: int = 8
    timestep_embedding_dim: int = 64

    def __post_init__(self):
        if self.num_attention_blocks < MIN_ATTENTION_BLOCKS:
            raise ValueError(f"num_attention_blocks must be >= {MIN_ATTENTION_BLOCKS}")
        if self.attention_heads * self.head_dim != self.base_width:
            raise ValueError("attention_heads * head_dim must equal base_width")
        if self.base_width % 8:
            raise ValueError("base_width must be a multiple of 8 (group norm)")
        if self.image_size % 4 or self.image_size < 4:
            raise ValueError("image_size must be a positive multiple of 4")
        if self.timestep_embedding_dim % 2:
            raise ValueError("timestep_embedding_dim must be even")

    @property
    def stage_blocks(self) -> tuple[int, int, int, int, int]:
        """Attention blocks per stage: enc/2, enc/4, mid/4, dec/4, dec/2."""
        return (2, 4, self.num_attention_blocks - 12, 4, 2)

    def block_resolution(self, block: int) -> int:
        counts = self.stage_blocks
        scale = (2, 4, 4, 4, 2)
        edge = 0
        for c, s in zip(counts, scale):
            edge += c
            if block < edge:
                return self.image_size // s
        raise IndexError(f"block {block} outside 0..{self.num_attention_blocks - 1}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, width: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.temb = nn.Linear(temb, width)
        self.norm2 = nn.GroupNorm(8, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention over a token sequence ``(B, s, C)``."""

    def __init__(self, width: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.norm = nn.GroupNorm(8, width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def split_heads(self, x):
        b, s, _ = x.shape
        return x.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)

    def project(self, tokens):
        h = self.norm(tokens.transpose(1, 2)).transpose(1, 2)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        return self.split_heads(q), self.split_heads(k), self.split_heads(v)

    def forward(self, tokens, injected=None):
        q, k, v = self.project(tokens)
        native = attention(q, k, v, 1.0)
        a = native
        if injected is not None:
            if injected.shape[-3:] != native.shape[-3:]:
                raise ValueError(
                    f"injected attention output {tuple(injected.shape)} does not match {tuple(native.shape)}"
                )
            a = injected.expand_as(native) if injected.ndim == 3 else injected
        b, _, s, _ = a.shape
        merged = a.transpose(1, 2).reshape(b, s, self.heads * self.head_dim)
        return tokens + self.proj(merged), (q, k, v, native)


class MicroUNet(nn.Module):
    """Three-resolution UNet (full, /2, /4) with attention at /2 and /4.

    Attention blocks are numbered in forward order; with 16 blocks the
    decoder owns 10..15.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        w, te = config.base_width, config.timestep_embedding_dim
        self.time_mlp = nn.Sequential(nn.Linear(te, te), nn.SiLU(), nn.Linear(te, te))
        self.conv_in = nn.Conv2d(config.channels, w, 3, padding=1)
        self.res_in = ResBlock(w, te)
        self.down1 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.stage_res = nn.ModuleList([ResBlock(w, te) for _ in range(5)])
        self.attn = nn.ModuleList(
            [AttentionBlock(w, config.attention_heads, config.head_dim) for _ in range(config.num_attention_blocks)]
        )
        self.up1 = nn.Conv2d(w, w, 3, padding=1)
        self.up2 = nn.Conv2d(w, w, 3, padding=1)
        self.res_out = ResBlock(w, te)
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, config.channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.trained_steps = 0

    def forward(self, z, t, capture=(), inject=None, stream="output", timestep_label=None, need_eps=True):
        cfg = self.config
        inject = inject or {}
        capture = set(capture)
        for b in list(capture) + list(inject):
            if not 0 <= b < cfg.num_attention_blocks:
                raise IndexError(f"block index {b} outside 0..{cfg.num_attention_blocks - 1}")
        last = max(capture) if capture else -1
        label = int(t[0]) if timestep_label is None else int(timestep_label)
        emb = self.time_mlp(timestep_embedding(t, cfg.timestep_embedding_dim).to(z.dtype))
        taps: list[AttentionTap] = []
        counter = iter(range(cfg.num_attention_blocks))

        def run_attention(h, count):
            bsz, c, hh, ww = h.shape
            tokens = h.flatten(2).transpose(1, 2)
            for _ in range(count):
                i = next(counter)
                tokens, (q, k, v, native) = self.attn[i](tokens, inject.get(i))
                if i in capture:
                    taps.append(AttentionTap(i, label, stream, q, k, v, native, (hh, ww)))
            return tokens.transpose(1, 2).reshape(bsz, c, hh, ww)

        n_enc2, n_enc4, n_mid, n_dec4, n_dec2 = cfg.stage_blocks
        h0 = self.res_in(self.conv_in(z), emb)
        h = self.stage_res[0](self.down1(h0), emb)
        h1 = run_attention(h, n_enc2)
        h = self.stage_res[1](self.down2(h1), emb)
        h2 = run_attention(h, n_enc4)
        h = run_attention(self.stage_res[2](h2, emb), n_mid)
        h = run_attention(self.stage_res[3](h + h2, emb), n_dec4)
        if not need_eps and last < cfg.num_attention_blocks - n_dec2:
            return None, taps
        h = self.up1(F.interpolate(h, scale_factor=2.0, mode="nearest")) + h1
        h = run_attention(self.stage_res[4](h, emb), n_dec2)
        if not need_eps:
            return None, taps
        h = self.up2(F.interpolate(h, scale_factor=2.0, mode="nearest")) + h0
        h = self.res_out(h, emb)
        return self.conv_out(F.silu(self.norm_out(h))), taps


DenoiserModel = MicroUNet


def init_model(config: DenoiserConfig | None = None, seed: int = 0) -> MicroUNet:
    config = config or DenoiserConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MicroUNet(config)
    return model


def _as_batch(z: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor, bool]:
    single = z.ndim == 3
    if single:
        z = z.unsqueeze(0)
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        tt = t
    else:
        tt = torch.full((z.shape[0],), int(t), dtype=torch.long)
    if bool((tt < 0).any()):
        raise ValueError("timestep must be non-negative")
    return z, tt, single


def forward(
    model: MicroUNet,
    z_t: torch.Tensor,
    t,
    blocks: Iterable[int] = (),
    inject: Optional[Mapping[int, torch.Tensor]] = None,
    stream: str = "output",
    timestep_label: Optional[int] = None,
    need_eps: bool = True,
) -> tuple[Optional[torch.Tensor], list[AttentionTap]]:
    """Noise prediction for ``z_t`` at training timestep ``t`` plus the requested taps.

    ``z_t`` is ``(c, H, W)`` or batched ``(B, c, H, W)``; tap tensors follow
    suit (``(h, s, d)`` or ``(B, h, s, d)``). ``inject`` maps a block index to
    a replacement for that block's attention output. With ``need_eps=False``
    the pass stops once the last requested block has run and ``eps`` is None.
    """
    cfg = model.config
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if tuple(z_t.shape[-3:]) != expected:
        raise ValueError(f"latent shape {tuple(z_t.shape)} does not match model {expected}")
    z, tt, single = _as_batch(z_t, t)
    eps, taps = model(z, tt, tuple(blocks), inject, stream, timestep_label, need_eps)
    if single:
        eps = None if eps is None else eps[0]
        taps = [
            AttentionTap(tp.block_index, tp.timestep, tp.stream, tp.q[0], tp.k[0], tp.v[0], tp.out[0], tp.grid)
            for tp in taps
        ]
    taps.sort(key=lambda tp: tp.block_index)
    return eps, taps


def attention_block_forward(
    model: MicroUNet, block: int, tokens: torch.Tensor, injected: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Run one attention block on tokens ``(s, C)`` or ``(B, s, C)``."""
    if not 0 <= block < model.config.num_attention_blocks:
        raise IndexError(f"block index {block} outside 0..{model.config.num_attention_blocks - 1}")
    single = tokens.ndim == 2
    x = tokens.unsqueeze(0) if single else tokens
    out, _ = model.attn[block](x, injected)
    return out[0] if single else out


def block_native_attention(model: MicroUNet, block: int, tokens: torch.Tensor) -> torch.Tensor:
    x = tokens.unsqueeze(0) if tokens.ndim == 2 else tokens
    _, (_, _, _, native) = model.attn[block](x)
    return native[0] if tokens.ndim == 2 else native


# ---------------------------------------------------------------- training


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)

    def smoothed(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.losses, dtype=np.float64)
        if len(x) < window:
            return x
        kernel = np.ones(window) / window
        return np.convolve(x, kernel, mode="valid")

    @property
    def initial(self) -> float:
        s = self.smoothed()
        return float(s[0]) if len(s) else float("nan")

    @property
    def final(self) -> float:
        s = self.smoothed()
        return float(s[-1]) if len(s) else float("nan")


def train(
    model: MicroUNet,
    dataset: torch.Tensor,
    steps: int,
    seed: int = 0,
    batch_size: int = 8,
    lr: float = 2e-3,
    train_steps: int = 1000,
) -> tuple[MicroUNet, TrainReport]:
    """DDPM epsilon-prediction training with Adam; returns a new model.

    The input model is not modified. Sampling of images, timesteps and noise
    is driven by a private generator seeded with ``seed``.
    """
    from .diffusion import train_alphas_bar

    if dataset.ndim != 4 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (N, c, H, W) tensor")
    cfg = model.config
    if tuple(dataset.shape[1:]) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"dataset images {tuple(dataset.shape[1:])} do not match model config")
    model = copy.deepcopy(model)
    report = TrainReport()
    if steps <= 0:
        return model, report
    abar = train_alphas_bar(train_steps).to(torch.float32)
    gen = torch.Generator().manual_seed(seed)
    params = list(model.parameters())
    states = [AdamState.zeros_like(p.detach()) for p in params]
    data = dataset.to(torch.float32)
    for step in range(1, steps + 1):
        idx = torch.randint(0, data.shape[0], (batch_size,), generator=gen)
        t = torch.randint(0, train_steps, (batch_size,), generator=gen)
        noise = torch.randn((batch_size,) + tuple(data.shape[1:]), generator=gen)
        a = abar[t][:, None, None, None]
        x_t = a.sqrt() * data[idx] + (1 - a).sqrt() * noise
        for p in params:
            p.grad = None
        eps, _ = model(x_t, t)
        loss = F.mse_loss(eps, noise)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step)
        loss.backward()
        with torch.no_grad():
            for i, p in enumerate(params):
                new, states[i] = adam_step(p.detach(), p.grad, states[i], lr, step)
                p.copy_(new)
        report.losses.append(loss.item())
    model.trained_steps += steps
    return model, report


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: MicroUNet, path: str | Path, extra: Mapping | None = None) -> None:
    meta = {"config": asdict(model.config), "trained_steps": int(model.trained_steps)}
    if extra:
        meta["extra"] = dict(extra)
    container.save(path, "MODEL", meta, {k: v for k, v in model.state_dict().items()})


def load_checkpoint(path: str | Path) -> MicroUNet:
    header, tensors = container.load(path, kind="MODEL")
    meta = header["meta"]
    model = MicroUNet(DenoiserConfig(**meta["config"]))
    model.load_state_dict(tensors)
    for name, p in model.state_dict().items():
        check_finite(p, f"parameter {name}")
    model.trained_steps = int(meta["trained_steps"])
    return model


def to_verification(model: MicroUNet) -> MicroUNet:
    """Float64 copy for finite-difference checks."""
    m = copy.deepcopy(model).to(torch.float64)
    m.trained_steps = model.trained_steps
    return m


def parameters_finite(model: MicroUNet) -> bool:
    try:
        for name, p in model.named_parameters():
            check_finite(p.detach(), name)
    except NonFiniteError:
        return False
    return True
