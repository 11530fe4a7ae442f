"""Deterministic DDIM scheduler: inversion and the reverse step (eta = 0)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import container
from .denoiser import MicroUNet, forward
from .gradcore import NonFiniteError

BETA_START = 1e-4
BETA_END = 0.02


def train_alphas_bar(train_steps: int = 1000) -> torch.Tensor:
    """Cumulative product of ``1 - beta`` for the linear DDPM beta schedule (float64)."""
    betas = torch.linspace(BETA_START, BETA_END, train_steps, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


@dataclass(frozen=True)
class Schedule:
    """Inference schedule with ``T`` steps subsampled from ``train_steps``.

    ``alphas_bar[0]`` is 1 (clean signal); ``alphas_bar[t]`` for ``t`` in
    1..T is the training value at ``index_map[t - 1]``.
    """

    T: int = 200
    train_steps: int = 1000
    alphas_bar: tuple[float, ...] = field(default=(), repr=False)
    index_map: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.T < 1 or self.T > self.train_steps:
            raise ValueError(f"need 1 <= T <= train_steps, got T={self.T}")
        if not self.index_map:
            idx = tuple(int(i) for i in np.floor(np.arange(self.T) * self.train_steps / self.T).astype(np.int64))
            object.__setattr__(self, "index_map", idx)
        if not self.alphas_bar:
            train = train_alphas_bar(self.train_steps)
            abar = (1.0,) + tuple(float(train[i]) for i in self.index_map)
            object.__setattr__(self, "alphas_bar", abar)
        if len(self.alphas_bar) != self.T + 1 or len(self.index_map) != self.T:
            raise ValueError("alphas_bar must have T+1 entries and index_map T entries")
        if any(b <= a for a, b in zip(self.index_map, self.index_map[1:])):
            raise ValueError("index_map must be strictly increasing")
        if any(not 0.0 < a <= 1.0 for a in self.alphas_bar):
            raise ValueError("alphas_bar values must lie in (0, 1]")
        if any(b > a for a, b in zip(self.alphas_bar, self.alphas_bar[1:])):
            raise ValueError("alphas_bar must be non-increasing in t")

    @classmethod
    def from_alphas_bar(cls, alphas_bar, train_steps: int = 1000) -> "Schedule":
        abar = tuple(float(a) for a in alphas_bar)
        T = len(abar) - 1
        idx = tuple(int(i) for i in np.floor(np.arange(T) * train_steps / T).astype(np.int64))
        return cls(T=T, train_steps=train_steps, alphas_bar=abar, index_map=idx)

    def train_index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"inference timestep {t} outside 1..{self.T}")
        return self.index_map[t - 1]


@dataclass
class Trajectory:
    latents: list[torch.Tensor]
    schedule: Schedule
    source: str = ""

    def __getitem__(self, t: int) -> torch.Tensor:
        return self.latents[t]

    def __len__(self) -> int:
        return len(self.latents)


def _coeffs(schedule: Schedule, t: int) -> tuple[float, float]:
    return schedule.alphas_bar[t], schedule.alphas_bar[t - 1]


def step_from_eps(z_t: torch.Tensor, eps: torch.Tensor, a_t: float, a_prev: float) -> torch.Tensor:
    """Move a latent from noise level ``a_t`` to ``a_prev`` with a fixed noise estimate."""
    x0 = (z_t - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps


def ddim_step(
    model: Optional[MicroUNet],
    z_t: torch.Tensor,
    t: int,
    schedule: Schedule,
    eps_override: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """``z_t -> z_{t-1}``; the model is only consulted when no ``eps_override`` is given."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"ddim_step timestep {t} outside 1..{schedule.T}")
    if eps_override is None:
        with torch.no_grad():
            eps, _ = forward(model, z_t, schedule.train_index(t))
    else:
        eps = eps_override
    a_t, a_prev = _coeffs(schedule, t)
    return step_from_eps(z_t, eps, a_t, a_prev)


def inversion_step(z_prev: torch.Tensor, t: int, schedule: Schedule, eps: torch.Tensor) -> torch.Tensor:
    """``z_{t-1} -> z_t``; exact algebraic inverse of :func:`ddim_step` for the same ``eps``."""
    a_t, a_prev = _coeffs(schedule, t)
    return step_from_eps(z_prev, eps, a_prev, a_t)


def ddim_invert(model: MicroUNet, z_0: torch.Tensor, schedule: Schedule, source: str = "") -> Trajectory:
    """Invert a clean latent to noise, keeping every intermediate latent.

    The noise estimate for the ``t-1 -> t`` move is the model's prediction
    on ``z_{t-1}`` labelled with timestep ``t``.
    """
    if not bool(torch.isfinite(z_0).all()):
        raise NonFiniteError("non-finite clean latent")
    latents = [z_0]
    z = z_0
    with torch.no_grad():
        for t in range(1, schedule.T + 1):
            eps, _ = forward(model, z, schedule.train_index(t))
            z = inversion_step(z, t, schedule, eps)
            if not bool(torch.isfinite(z).all()):
                raise NonFiniteError(f"inversion produced non-finite latent at t={t}")
            latents.append(z)
    return Trajectory(latents, schedule, source)


def ddim_sample(model: MicroUNet, z_T: torch.Tensor, schedule: Schedule) -> torch.Tensor:
    z = z_T
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            z = ddim_step(model, z, t, schedule)
            if not bool(torch.isfinite(z).all()):
                raise NonFiniteError(f"sampling produced non-finite latent at t={t - 1}")
    return z


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    meta = {
        "T": traj.schedule.T,
        "train_steps": traj.schedule.train_steps,
        "alphas_bar": list(traj.schedule.alphas_bar),
        "index_map": list(traj.schedule.index_map),
        "source": traj.source,
    }
    container.save(path, "TRAJ", meta, {f"z{t}": z for t, z in enumerate(traj.latents)})


def load_trajectory(path: str | Path) -> Trajectory:
    header, tensors = container.load(path, kind="TRAJ")
    m = header["meta"]
    sched = Schedule(m["T"], m["train_steps"], tuple(m["alphas_bar"]), tuple(m["index_map"]))
    return Trajectory([tensors[f"z{t}"] for t in range(m["T"] + 1)], sched, m["source"])
