"""End-to-end pipelines: StyleID injection, attention distillation, V-Shuffle."""
from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .denoiser import MicroUNet, forward
from .diffusion import Schedule, Trajectory, ddim_invert, ddim_step
from .features import FeatureCache, adain, attention, blend_queries
from .gradcore import AdamState, NonFiniteError, adam_step
from .losses import (
    HsrSpec,
    ShuffleSpec,
    ad_from_targets,
    build_targets,
    hsr_from_targets,
)

METHODS = ("styleid", "ad", "vshuffle")
DEFAULT_BLOCKS = (10, 11, 12, 13, 14, 15)
DEFAULT_TAU = {"styleid": 1.5, "ad": 1.0, "vshuffle": 1.0}


class TransferDivergedError(RuntimeError):
    def __init__(self, t: int, inner: int, transcript: list):
        super().__init__(f"optimization diverged at t={t}, inner step {inner}")
        self.t, self.inner, self.transcript = t, inner, transcript


@dataclass(frozen=True)
class TransferConfig:
    method: str = "vshuffle"
    T: int = 200
    window: tuple[float, float] = (0.2, 0.9)
    alpha: float = 0.4
    beta: float = 0.24
    gamma: float = 0.75
    tau: Optional[float] = None
    m: int = 1
    n: Optional[int] = None
    inner_steps: int = 10
    lr: float = 0.05
    blocks: tuple[int, ...] = DEFAULT_BLOCKS
    seed: int = 0
    axis: str = "s"
    resample_policy: str = "per-timestep"
    identity_shuffle: bool = False
    train_steps: int = 1000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "ad" and self.n not in (None, 1):
            raise ValueError("ad takes exactly one style image (n=1)")
        if self.method == "styleid" and self.n not in (None, 1):
            raise ValueError("styleid takes exactly one style image (n=1)")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not self.blocks:
            raise ValueError("block set is empty")
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "window", tuple(float(w) for w in self.window))
        # validates alpha, beta, window, m and axis eagerly
        self.hsr_spec()
        self.shuffle_spec()

    @property
    def effective_tau(self) -> float:
        return DEFAULT_TAU[self.method] if self.tau is None else float(self.tau)

    def hsr_spec(self) -> HsrSpec:
        return HsrSpec(self.alpha, self.window, self.beta)

    def shuffle_spec(self) -> ShuffleSpec:
        return ShuffleSpec(self.axis, self.m, self.seed, self.resample_policy, self.identity_shuffle)

    def schedule(self) -> Schedule:
        return Schedule(self.T, self.train_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        d["blocks"] = list(self.blocks)
        d["effective_tau"] = self.effective_tau
        return d


@dataclass
class TransferResult:
    image: torch.Tensor  # (c, H, W) in [-1, 1]
    latent: torch.Tensor  # unclamped z_0 of the output stream
    losses: list[list[float]]  # one list of inner-step losses per timestep, t = T..1
    timesteps: list[int]
    elapsed: float
    config: dict
    transcript: list = field(default_factory=list)

    @property
    def image_uint8(self) -> np.ndarray:
        return decode(self.latent)


def encode(image: torch.Tensor) -> torch.Tensor:
    """Pixel-space stand-in for a VAE encoder."""
    return image


def decode(latent: torch.Tensor) -> np.ndarray:
    """Clamp to [-1, 1] and map to 8-bit HWC."""
    x = latent.detach().clamp(-1.0, 1.0)
    return np.round((x.cpu().numpy().transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)


def decode_tensor(latent: torch.Tensor) -> torch.Tensor:
    return latent.detach().clamp(-1.0, 1.0)


class InversionCache:
    """Memoizes DDIM inversions by image content and schedule."""

    def __init__(self):
        self._store: dict[tuple, Trajectory] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(model: MicroUNet, image: torch.Tensor, schedule: Schedule) -> tuple:
        digest = hashlib.sha1(image.detach().cpu().numpy().tobytes()).hexdigest()
        return (id(model), digest, schedule.T, schedule.train_steps)

    def invert(self, model: MicroUNet, image: torch.Tensor, schedule: Schedule, source: str = "") -> Trajectory:
        k = self.key(model, image, schedule)
        with self._lock:
            hit = self._store.get(k)
        if hit is not None:
            return hit
        traj = ddim_invert(model, encode(image), schedule, source)
        with self._lock:
            self._store.setdefault(k, traj)
        return traj

    def __len__(self):
        return len(self._store)


def _check_images(content: torch.Tensor, styles: Sequence[torch.Tensor], model: MicroUNet) -> None:
    cfg = model.config
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    for img in [content, *styles]:
        if tuple(img.shape) != expected:
            raise ValueError(f"image shape {tuple(img.shape)} does not match model {expected}")
    if model.trained_steps <= 0:
        raise ValueError("model is untrained; train it or load a checkpoint first")


def _stream_taps(model, traj: Trajectory, t: int, schedule: Schedule, blocks, stream: str):
    with torch.no_grad():
        _, taps = forward(model, traj[t], schedule.train_index(t), blocks, stream=stream, timestep_label=t, need_eps=False)
    return taps


def _invert_all(model, content, styles, schedule, cache):
    cache = InversionCache() if cache is None else cache
    traj_c = cache.invert(model, content, schedule, "content")
    traj_s = [cache.invert(model, s, schedule, f"style{i}") for i, s in enumerate(styles)]
    return traj_c, traj_s


def run_styleid(
    model: MicroUNet, content: torch.Tensor, style: torch.Tensor, config: TransferConfig,
    cache: Optional[InversionCache] = None,
) -> TransferResult:
    """Blended-query attention injection with an AdaIN-initialized noise latent."""
    if config.method != "styleid" or config.n != 1:
        config = replace(config, method="styleid", n=1)
    _check_images(content, [style], model)
    start = time.perf_counter()
    schedule = config.schedule()
    blocks, tau = config.blocks, config.effective_tau
    traj_c, (traj_s,) = _invert_all(model, content, [style], schedule, cache)
    z = adain(traj_c[schedule.T], traj_s[schedule.T])
    steps = list(range(schedule.T, 0, -1))
    with torch.no_grad():
        for t in steps:
            tidx = schedule.train_index(t)
            taps_c = _stream_taps(model, traj_c, t, schedule, blocks, "content")
            taps_s = _stream_taps(model, traj_s, t, schedule, blocks, "style0")
            _, taps_o = forward(model, z, tidx, blocks, stream="output", timestep_label=t, need_eps=False)
            inject = {
                o.block_index: attention(blend_queries(c.q, o.q, config.gamma), s.k, s.v, tau)
                for c, s, o in zip(taps_c, taps_s, taps_o)
            }
            eps, _ = forward(model, z, tidx, inject=inject)
            z = ddim_step(None, z, t, schedule, eps_override=eps)
            if not bool(torch.isfinite(z).all()):
                raise NonFiniteError(f"styleid produced non-finite latent at t={t - 1}")
    return TransferResult(
        decode_tensor(z), z, [[] for _ in steps], steps, time.perf_counter() - start, config.to_dict()
    )


def _optimize(model, content, styles, config: TransferConfig, use_hsr: bool, cache) -> TransferResult:
    _check_images(content, styles, model)
    start = time.perf_counter()
    schedule = config.schedule()
    T, blocks, tau = schedule.T, config.blocks, config.effective_tau
    hsr, shuffle = config.hsr_spec(), config.shuffle_spec()
    traj_c, traj_s = _invert_all(model, content, styles, schedule, cache)
    z = encode(content).detach().clone()
    state = AdamState.zeros_like(z)
    transcript: list = []
    losses: list[list[float]] = []
    steps = list(range(T, 0, -1))
    count = 0
    for t in steps:
        tidx = schedule.train_index(t)
        taps_c = _stream_taps(model, traj_c, t, schedule, blocks, "content")
        style_taps = [_stream_taps(model, tr, t, schedule, blocks, f"style{i}") for i, tr in enumerate(traj_s)]
        inside = use_hsr and hsr.in_window(t, T)
        targets = build_targets(taps_c, style_taps, tau, shuffle if inside else None, t, 0, transcript=transcript)
        record = []
        for k in range(config.inner_steps):
            if inside and k > 0 and shuffle.resample_policy == "per-inner-step":
                targets = build_targets(taps_c, style_taps, tau, shuffle, t, k, transcript=transcript)
            leaf = z.detach().requires_grad_(True)
            _, taps_o = forward(model, leaf, tidx, blocks, stream="output", timestep_label=t, need_eps=False)
            if use_hsr:
                loss = hsr_from_targets(taps_o, targets, hsr.alpha, hsr.beta, tau, inside)
            else:
                loss = ad_from_targets(taps_o, targets, config.beta, tau)
            if not bool(torch.isfinite(loss)):
                raise TransferDivergedError(t, k, transcript)
            (grad,) = torch.autograd.grad(loss, leaf)
            record.append(loss.item())
            count += 1
            z, state = adam_step(z, grad, state, config.lr, count)
        losses.append(record)
    return TransferResult(
        decode_tensor(z), z.detach(), losses, steps, time.perf_counter() - start, config.to_dict(), transcript
    )


def run_ad(
    model: MicroUNet, content: torch.Tensor, style: torch.Tensor, config: TransferConfig,
    cache: Optional[InversionCache] = None,
) -> TransferResult:
    """Per-timestep optimization of the clean content latent against the distillation loss."""
    if config.method != "ad" or config.n != 1:
        config = replace(config, method="ad", n=1)
    return _optimize(model, content, [style], config, use_hsr=False, cache=cache)


def run_vshuffle(
    model: MicroUNet, content: torch.Tensor, styles: Sequence[torch.Tensor], config: TransferConfig,
    cache: Optional[InversionCache] = None,
) -> TransferResult:
    """As :func:`run_ad` but minimizing the hybrid shuffled/unshuffled objective over ``n`` styles."""
    styles = list(styles) if not isinstance(styles, torch.Tensor) or styles.ndim == 4 else [styles]
    if len(styles) < 1:
        raise ValueError("need at least one style image")
    if config.method != "vshuffle" or config.n != len(styles):
        config = replace(config, method="vshuffle", n=len(styles))
    return _optimize(model, content, styles, config, use_hsr=True, cache=cache)


def run(model, content, styles: Sequence[torch.Tensor], config: TransferConfig, cache=None) -> TransferResult:
    styles = list(styles)
    if config.method == "vshuffle":
        return run_vshuffle(model, content, styles, config, cache)
    if len(styles) != 1:
        raise ValueError(f"method {config.method} requires exactly one style image, got {len(styles)}")
    if config.method == "ad":
        return run_ad(model, content, styles[0], config, cache)
    return run_styleid(model, content, styles[0], config, cache)


def build_feature_cache(
    model: MicroUNet,
    content: Optional[torch.Tensor],
    styles: Sequence[torch.Tensor],
    schedule: Schedule,
    timesteps: Sequence[int],
    blocks: Sequence[int] = DEFAULT_BLOCKS,
    cache: Optional[InversionCache] = None,
) -> FeatureCache:
    """Invert the images and record taps at the requested inference timesteps."""
    cache = InversionCache() if cache is None else cache
    streams = [] if content is None else [("content", cache.invert(model, content, schedule, "content"))]
    streams += [(f"style{i}", cache.invert(model, s, schedule, f"style{i}")) for i, s in enumerate(styles)]
    out = FeatureCache()
    for t in timesteps:
        for name, traj in streams:
            for tap in _stream_taps(model, traj, t, schedule, tuple(blocks), name):
                out.add(tap)
    return out
