"""Proxy metrics, value-feature PCA, the shuffle-axis ablation and Pareto sweeps."""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .denoiser import MicroUNet, forward
from .features import FeatureCache
from .losses import ShuffleSpec, shuffle_values
from .transfer import DEFAULT_BLOCKS, InversionCache, TransferConfig, TransferResult, decode, run

HIST_BINS = 32
METRIC_TIMESTEP = 0
CSV_HEADER = (
    "method", "beta", "alpha", "n", "m", "seed",
    "style_gram", "style_hist", "content_edge", "content_query", "pareto",
)


@dataclass(frozen=True)
class MetricReport:
    style_proxy_gram: float
    style_proxy_hist: float
    content_proxy_edge: float
    content_proxy_query: float


# ---------------------------------------------------------------- metrics


def _value_features(model, image, blocks):
    with torch.no_grad():
        _, taps = forward(model, image, METRIC_TIMESTEP, blocks, need_eps=False)
    return taps


def gram(v: torch.Tensor) -> np.ndarray:
    """Token-averaged Gram matrix of a ``(h, s, d)`` value tensor, heads concatenated."""
    h, s, d = v.shape
    f = v.detach().to(torch.float64).transpose(0, 1).reshape(s, h * d).numpy()
    return f.T @ f / s


def channel_histograms(image: torch.Tensor, bins: int = HIST_BINS) -> np.ndarray:
    x = image.detach().to(torch.float64).clamp(-1, 1).numpy()
    out = np.empty((x.shape[0], bins))
    for c in range(x.shape[0]):
        counts, _ = np.histogram(x[c], bins=bins, range=(-1.0, 1.0))
        out[c] = counts / counts.sum()
    return out


def histogram_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """Per-channel L1 distance of normalized histograms, averaged over channels."""
    return float(np.abs(channel_histograms(a) - channel_histograms(b)).sum(axis=1).mean())


def sobel_magnitude(image: torch.Tensor) -> np.ndarray:
    x = image.detach().to(torch.float64).numpy()
    gray = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2] if x.shape[0] == 3 else x.mean(0)
    gx = ndimage.sobel(gray, axis=1, mode="reflect")
    gy = ndimage.sobel(gray, axis=0, mode="reflect")
    return np.hypot(gx, gy)


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def edge_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    return 1.0 - normalized_cross_correlation(sobel_magnitude(a), sobel_magnitude(b))


def compute_metrics(
    stylized: torch.Tensor,
    content: torch.Tensor,
    styles: Sequence[torch.Tensor],
    model: MicroUNet,
    blocks: Sequence[int] = DEFAULT_BLOCKS,
) -> MetricReport:
    """Style and content proxies of ``stylized`` against a style set and a content image."""
    if stylized.shape != content.shape or any(s.shape != content.shape for s in styles):
        raise ValueError("all images must share one shape")
    blocks = tuple(blocks)
    taps_cs = _value_features(model, stylized, blocks)
    taps_c = _value_features(model, content, blocks)
    grams_cs = [gram(t.v) for t in taps_cs]
    g_dist, h_dist = [], []
    for style in styles:
        taps_s = _value_features(model, style, blocks)
        g_dist.append(np.mean([np.abs(a - gram(t.v)).mean() for a, t in zip(grams_cs, taps_s)]))
        h_dist.append(histogram_distance(stylized, style))
    q_dist = np.mean([
        (a.q.detach().to(torch.float64) - b.q.detach().to(torch.float64)).abs().mean().item()
        for a, b in zip(taps_cs, taps_c)
    ])
    return MetricReport(
        float(np.mean(g_dist)), float(np.mean(h_dist)), edge_distance(stylized, content), float(q_dist)
    )


# ---------------------------------------------------------------- PCA


@dataclass
class PcaResult:
    image: np.ndarray  # (n, H', W', 3) uint8
    ratios: np.ndarray  # (k,)
    scores: np.ndarray  # (N, k)
    components: np.ndarray  # (k, D)


def pca(x: np.ndarray, k: int = 3, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` principal directions of the centered rows of ``x``.

    Each direction's largest-magnitude loading is made positive. Directions
    beyond the data's rank are returned as zeros with zero ratio. Returns
    ``(scores, components, explained_variance_ratios)``.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / max(x.shape[0], 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    total = evals.sum()
    comps = np.zeros((k, x.shape[1]))
    ratios = np.zeros(k)
    for i in range(min(k, x.shape[1])):
        if total <= 0 or evals[i] <= tol * max(evals[0], tol):
            continue
        vec = evecs[:, i]
        vec = vec * np.sign(vec[np.argmax(np.abs(vec))])
        comps[i] = vec
        ratios[i] = evals[i] / total
    return xc @ comps.T, comps, ratios


def scores_to_rgb(scores: np.ndarray) -> np.ndarray:
    out = np.zeros((scores.shape[0], 3))
    for i in range(min(3, scores.shape[1])):
        col = scores[:, i]
        lo, hi = col.min(), col.max()
        out[:, i] = 0.5 if hi - lo <= 0 else (col - lo) / (hi - lo)
    return np.round(out * 255).astype(np.uint8)


def value_matrix(cache: FeatureCache, t: int, block: int, shuffle: Optional[ShuffleSpec] = None):
    taps = cache.style_taps(t, block)
    v = torch.stack([tap.v.detach() for tap in taps]).to(torch.float64)  # (n, h, s, d)
    if shuffle is not None:
        v, _ = shuffle_values(v, shuffle, 0, t, block)
    n, h, s, d = v.shape
    return v.permute(0, 2, 1, 3).reshape(n * s, h * d).numpy(), taps[0].grid, n


def pca_value_features(
    cache: FeatureCache, t: int, block: int, k: int = 3, shuffle: Optional[ShuffleSpec] = None
) -> PcaResult:
    """PCA of the stacked ``(n*s, h*d)`` style value matrix, coloured over each image's token grid."""
    x, grid, n = value_matrix(cache, t, block, shuffle)
    if x.shape[0] // n < k:
        raise ValueError(f"need at least {k} tokens per image")
    scores, comps, ratios = pca(x, k)
    rgb = scores_to_rgb(scores).reshape(n, grid[0], grid[1], 3)
    return PcaResult(rgb, ratios, scores, comps)


def spatial_autocorrelation(img: np.ndarray) -> float:
    """Lag-1 Pearson correlation between horizontally and vertically adjacent pixels, channel-averaged."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    vals = []
    for c in range(x.shape[-1]):
        ch = x[..., c]
        a = np.concatenate([ch[:, :-1].ravel(), ch[:-1, :].ravel()])
        b = np.concatenate([ch[:, 1:].ravel(), ch[1:, :].ravel()])
        if a.std() == 0 or b.std() == 0:
            continue
        vals.append(np.corrcoef(a, b)[0, 1])
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------- ablation


def image_grid(images: Sequence[np.ndarray], pad: int = 2) -> np.ndarray:
    h, w, c = images[0].shape
    out = np.full((h, len(images) * (w + pad) - pad, c), 255, dtype=np.uint8)
    for i, im in enumerate(images):
        out[:, i * (w + pad): i * (w + pad) + w] = im
    return out


@dataclass
class AxisAblation:
    results: dict[str, TransferResult]
    metrics: dict[str, MetricReport]
    grid: np.ndarray


def run_axis_ablation(
    model: MicroUNet,
    content: torch.Tensor,
    style: torch.Tensor,
    config: TransferConfig,
    axes: Sequence[str] = ("h", "s", "d"),
    cache: Optional[InversionCache] = None,
) -> AxisAblation:
    """V-Shuffle with the full shuffled objective over all timesteps, once per shuffle axis."""
    cache = InversionCache() if cache is None else cache
    results, metrics = {}, {}
    for axis in axes:
        cfg = replace(config, method="vshuffle", n=1, alpha=1.0, window=(0.0, 1.0), axis=axis)
        res = run(model, content, [style], cfg, cache)
        results[axis] = res
        metrics[axis] = compute_metrics(res.image, content, [style], model, cfg.blocks)
    tiles = [decode(content), decode(style)] + [results[a].image_uint8 for a in axes]
    return AxisAblation(results, metrics, image_grid(tiles))


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    method: str
    beta: float
    alpha: float
    n: int
    m: int
    seed: int
    metrics: Optional[MetricReport]
    pareto_flag: bool = False
    error: Optional[str] = None

    def point(self) -> tuple[float, float]:
        return (self.metrics.style_proxy_gram, self.metrics.content_proxy_edge)


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_flags(points: Sequence[Optional[tuple[float, float]]]) -> list[bool]:
    """Non-dominated mask (lower is better on both axes); ``None`` entries are never optimal."""
    valid = sorted((p, i) for i, p in enumerate(points) if p is not None)
    flags = [False] * len(points)
    best_second = math.inf
    j = 0
    # sweep by first coordinate; equal first coordinates are resolved as a group
    while j < len(valid):
        k = j
        while k < len(valid) and valid[k][0][0] == valid[j][0][0]:
            k += 1
        group = valid[j:k]
        group_min = group[0][0][1]
        for p, i in group:
            flags[i] = p[1] < best_second and p[1] == group_min
        best_second = min(best_second, group_min)
        j = k
    return flags


@contextmanager
def _single_threaded_torch():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def sweep_parallelism(requested: int) -> int:
    cap = os.environ.get("VSHUFFLE_THREADS")
    p = max(1, int(requested))
    if cap:
        p = min(p, max(1, int(cap)))
    return p


def run_sweep(
    grid: Sequence[TransferConfig],
    model: MicroUNet,
    content: torch.Tensor,
    styles: Sequence[torch.Tensor],
    parallelism: int = 1,
    cache: Optional[InversionCache] = None,
) -> list[SweepRow]:
    """Run every config on one content image and the first ``n`` styles; flag Pareto rows.

    Cell failures are recorded on the row and do not stop the sweep.
    """
    if not grid:
        raise ValueError("sweep grid is empty")
    cache = InversionCache() if cache is None else cache

    def cell(cfg: TransferConfig) -> SweepRow:
        n = 1 if cfg.method != "vshuffle" else (cfg.n or len(styles))
        row = SweepRow(cfg.method, cfg.beta, cfg.alpha, n, cfg.m, cfg.seed, None)
        try:
            used = list(styles[:n])
            if len(used) < n:
                raise ValueError(f"cell asks for n={n} styles, only {len(styles)} supplied")
            res = run(model, content, used, cfg, cache)
            row.metrics = compute_metrics(res.image, content, used, model, cfg.blocks)
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            row.error = f"{type(exc).__name__}: {exc}"
        return row

    with _single_threaded_torch():
        workers = sweep_parallelism(parallelism)
        if workers == 1:
            rows = [cell(cfg) for cfg in grid]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(cell, grid))
    flags = pareto_flags([r.point() if r.metrics is not None else None for r in rows])
    for r, f in zip(rows, flags):
        r.pareto_flag = f
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        m = r.metrics
        vals = ("nan",) * 4 if m is None else (
            _fmt(m.style_proxy_gram), _fmt(m.style_proxy_hist), _fmt(m.content_proxy_edge), _fmt(m.content_proxy_query)
        )
        w.writerow([r.method, _fmt(r.beta), _fmt(r.alpha), r.n, r.m, r.seed, *vals, "true" if r.pareto_flag else "false"])
    return buf.getvalue()


# ---------------------------------------------------------------- style-count study


@dataclass
class StyleCountStudy:
    per_pair: list[dict[int, MetricReport]] = field(default_factory=list)

    def median(self, n: int, attr: str) -> float:
        return float(np.median([getattr(p[n], attr) for p in self.per_pair]))


def run_style_count_study(
    model: MicroUNet,
    pairs: Sequence[tuple[torch.Tensor, Sequence[torch.Tensor]]],
    config: TransferConfig,
    ns: Sequence[int] = (1, 3),
    cache: Optional[InversionCache] = None,
) -> StyleCountStudy:
    """V-Shuffle with the first ``n`` styles of each pair's domain, for each ``n``.

    Metrics are always taken against the full style set of the pair so that
    the style proxy compares like with like across ``n``.
    """
    cache = InversionCache() if cache is None else cache
    study = StyleCountStudy()
    for content, styles in pairs:
        styles = list(styles)
        entry = {}
        for n in ns:
            res = run(model, content, styles[:n], replace(config, method="vshuffle", n=n), cache)
            entry[n] = compute_metrics(res.image, content, styles, model, config.blocks)
        study.per_pair.append(entry)
    return study
