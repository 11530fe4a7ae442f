"""Self-check suite behind ``vshuffle verify``: gradient and invariant oracles."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import denoiser, diffusion, gradcore, losses
from .features import attention

TOL_GRAD = 1e-3


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _composite(seed: int) -> Callable[[torch.Tensor], torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    target = torch.randn(2, 3, generator=gen, dtype=torch.float64)

    def f(x):
        return gradcore.l1_mean(gradcore.matmul(gradcore.softmax_lastdim(x), w), target) + (x * x).sum() * 0.1

    return f


def check_gradcore(seeds=range(20)) -> Check:
    worst = 0.0
    for seed in seeds:
        f = _composite(seed)
        x = torch.randn(2, 4, generator=torch.Generator().manual_seed(1000 + seed), dtype=torch.float64)
        err = gradcore.relative_linf(gradcore.grad_of(f, x), gradcore.finite_diff_grad(f, x, 1e-6))
        worst = max(worst, err)
    return Check("gradcore backward vs finite differences", worst <= TOL_GRAD, f"max rel err {worst:.2e}")


def check_attention_equivariance(seeds=range(50)) -> Check:
    worst = 0.0
    for seed in seeds:
        g = torch.Generator().manual_seed(seed)
        q, k, v = (torch.randn(2, 6, 4, generator=g, dtype=torch.float64) for _ in range(3))
        perm = torch.randperm(6, generator=g)
        diff = (attention(q, k[:, perm], v[:, perm]) - attention(q, k, v)).abs().max().item()
        worst = max(worst, diff)
    return Check("attention joint K,V permutation invariance", worst <= 1e-6, f"max diff {worst:.2e}")


def check_shuffle_multiset(draws: int = 200) -> Check:
    ok = True
    for draw in range(draws):
        g = torch.Generator().manual_seed(draw)
        v = torch.randn(2, 3, 8, 4, generator=g)
        sh, perms = losses.shuffle_values(v, losses.ShuffleSpec(rng_seed=draw), draw)
        for i in range(v.shape[0]):
            a = np.sort(v[i].numpy(), axis=1)
            b = np.sort(sh[i].numpy(), axis=1)
            ok &= np.array_equal(a, b) and sorted(perms[i].tolist()) == list(range(8))
    return Check("value shuffle preserves token multiset", bool(ok), f"{draws} draws")


def check_ddim_inverse() -> Check:
    sched = diffusion.Schedule(T=20)
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for t in range(1, sched.T + 1):
        z_prev = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
        eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
        z_t = diffusion.inversion_step(z_prev, t, sched, eps)
        back = diffusion.ddim_step(None, z_t, t, sched, eps_override=eps)
        worst = max(worst, (back - z_prev).abs().max().item())
    return Check("DDIM step inverts the inversion step", worst <= 1e-10, f"max diff {worst:.2e}")


def check_model_gradient(seeds=range(3)) -> Check:
    cfg = denoiser.DenoiserConfig(image_size=4)
    worst = 0.0
    for seed in seeds:
        model = denoiser.to_verification(denoiser.init_model(cfg, seed))
        g = torch.Generator().manual_seed(seed)
        z_c, z_s, z_o = (torch.randn(3, 4, 4, generator=g, dtype=torch.float64) for _ in range(3))
        blocks = (13, 14, 15)
        with torch.no_grad():
            _, taps_c = denoiser.forward(model, z_c, 500, blocks)
            _, taps_s = denoiser.forward(model, z_s, 500, blocks)

        def f(z):
            _, taps_o = denoiser.forward(model, z, 500, blocks, need_eps=False)
            return losses.loss_ad(taps_o, taps_c, [taps_s], 0.24)

        err = gradcore.relative_linf(gradcore.grad_of(f, z_o), gradcore.finite_diff_grad(f, z_o, 1e-6))
        worst = max(worst, err)
    return Check("loss_ad gradient through micro model", worst <= TOL_GRAD, f"max rel err {worst:.2e}")


def check_hsr_affine() -> Check:
    g = torch.Generator().manual_seed(3)
    mk = lambda: [  # noqa: E731
        _tap(b, torch.randn(2, 4, 3, generator=g, dtype=torch.float64)) for b in (0, 1)
    ]
    out, c, s = mk(), mk(), [mk(), mk()]
    vals = {}
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        spec = losses.HsrSpec(alpha=a, window=(0.0, 1.0), beta=0.24)
        vals[a] = losses.loss_hsr(5, 10, spec, losses.ShuffleSpec(m=2), out, c, s).item()
    worst = max(abs(vals[a] - ((1 - a) * vals[0.0] + a * vals[1.0])) for a in (0.25, 0.5, 0.75))
    return Check("HSR loss affine in alpha", worst <= 1e-9, f"max deviation {worst:.2e}")


def _tap(block, x):
    from .features import AttentionTap

    return AttentionTap(block, 0, "synthetic", x, x.flip(-1), x * 0.5 + 1.0, None, (2, 2))


def check_exhaustive_expectation() -> Check:
    g = torch.Generator().manual_seed(9)
    out = [_tap(0, torch.randn(1, 4, 2, generator=g, dtype=torch.float64))]
    c = [_tap(0, torch.randn(1, 4, 2, generator=g, dtype=torch.float64))]
    s = [[_tap(0, torch.randn(1, 4, 2, generator=g, dtype=torch.float64))]]
    spec = losses.ShuffleSpec()
    perms = list(itertools.permutations(range(4)))
    vals = [
        losses.loss_style_shuffled(out, c, s, spec, source=lambda i, b, d, e, p=p: np.array(p)).item()
        for p in perms
    ]
    # independent numpy evaluation of the same expectation
    q = c[0].q.numpy()[0]
    k = s[0][0].k.numpy()[0]
    v = s[0][0].v.numpy()[0]
    o = out[0].q.numpy()[0], out[0].k.numpy()[0], out[0].v.numpy()[0]

    def attn(q_, k_, v_):
        lg = q_ @ k_.T / np.sqrt(q_.shape[1])
        w = np.exp(lg - lg.max(1, keepdims=True))
        return (w / w.sum(1, keepdims=True)) @ v_

    ref = np.mean([np.abs(attn(*o) - attn(q, k, v[list(p)])).mean() for p in perms])
    diff = abs(np.mean(vals) - ref)
    return Check("shuffle expectation matches enumeration", diff <= 1e-9, f"diff {diff:.2e}")


CHECKS = (
    check_gradcore,
    check_attention_equivariance,
    check_shuffle_multiset,
    check_ddim_inverse,
    check_model_gradient,
    check_hsr_affine,
    check_exhaustive_expectation,
)


def run_all() -> list[Check]:
    results = []
    for fn in CHECKS:
        try:
            results.append(fn())
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
            results.append(Check(fn.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results
