"""Procedural texture images grouped into style domains.

Every generator paints pixels from a small 8-bit palette with no
antialiasing, so each pixel is exactly one palette colour. Images are
returned as float32 tensors ``(N, 3, H, W)`` scaled to [-1, 1].
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np
import torch

KINDS = ("stripes", "checker", "noise-palette", "blobs", "constant", "shapes")


@dataclass(frozen=True)
class Domain:
    kind: str
    hue: float  # degrees
    n_colors: int = 3


DOMAINS: dict[str, Domain] = {
    "blue-blobs": Domain("blobs", 225.0),
    "red-stripes": Domain("stripes", 5.0, 2),
    "green-checker": Domain("checker", 120.0, 2),
    "orange-noise": Domain("noise-palette", 30.0, 4),
    "purple-stripes": Domain("stripes", 280.0, 3),
    "teal-blobs": Domain("blobs", 180.0),
}


def to_unit(rgb8: np.ndarray) -> np.ndarray:
    return rgb8.astype(np.float32) / 127.5 - 1.0


def make_palette(hue: float, n_colors: int, rng: np.random.Generator) -> np.ndarray:
    """``n_colors`` 8-bit RGB colours whose hues sit within 8 degrees of ``hue``."""
    cols = []
    values = np.linspace(0.35, 0.95, n_colors) if n_colors > 1 else np.array([0.7])
    for i in range(n_colors):
        h = ((hue + rng.uniform(-8.0, 8.0)) % 360.0) / 360.0
        s = rng.uniform(0.55, 0.95)
        r, g, b = colorsys.hsv_to_rgb(h, s, float(values[i]))
        cols.append([round(r * 255), round(g * 255), round(b * 255)])
    return np.asarray(cols, dtype=np.uint8)


def _stripes(size, palette, rng):
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 7.0)
    yy, xx = np.mgrid[0:size, 0:size]
    proj = xx * np.cos(theta) + yy * np.sin(theta) + rng.uniform(0, period)
    idx = np.floor(proj / period).astype(np.int64) % len(palette)
    return palette[idx]


def _checker(size, palette, rng):
    cell = int(rng.integers(3, 7))
    off = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    idx = ((yy + off[0]) // cell + (xx + off[1]) // cell) % len(palette)
    return palette[idx]


def _noise_palette(size, palette, rng):
    cell = int(rng.choice([2, 4]))
    low = rng.integers(0, len(palette), size=(size // cell + 1, size // cell + 1))
    idx = np.repeat(np.repeat(low, cell, axis=0), cell, axis=1)[:size, :size]
    return palette[idx]


def _blobs(size, palette, rng):
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = palette[0]
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(size * 0.08, size * 0.25)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = palette[int(rng.integers(1, len(palette))) if len(palette) > 1 else 0]
    return img


def _shapes(size, rng):
    """Content-style images: flat background with a few filled geometric shapes."""
    bg = rng.integers(20, 236, size=3).astype(np.uint8)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = bg
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 4))):
        col = rng.integers(0, 256, size=3).astype(np.uint8)
        kind = int(rng.integers(0, 3))
        cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
        r = rng.uniform(size * 0.12, size * 0.3)
        if kind == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * 0.7)
        else:
            mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) * 0.5)
        img[mask] = col
    return img


def make_texture_dataset(
    kind: str,
    count: int,
    seed: int = 0,
    size: int = 32,
    hue: float | None = None,
    n_colors: int | None = None,
) -> torch.Tensor:
    """``count`` images of one texture kind (or named domain) sharing a palette.

    ``kind`` is one of :data:`KINDS` or a key of :data:`DOMAINS`. The palette
    is drawn once per call from ``seed``, so a call yields one style domain.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if kind in DOMAINS:
        dom = DOMAINS[kind]
        kind = dom.kind
        hue = dom.hue if hue is None else hue
        n_colors = dom.n_colors if n_colors is None else n_colors
    if kind not in KINDS:
        raise ValueError(f"unknown texture kind {kind!r}; expected one of {KINDS} or {tuple(DOMAINS)}")
    rng = np.random.default_rng(seed)
    if hue is None:
        hue = float(rng.uniform(0, 360))
    n_colors = n_colors or 3
    palette = make_palette(hue, n_colors, rng)
    images = []
    for _ in range(count):
        if kind == "stripes":
            img = _stripes(size, palette, rng)
        elif kind == "checker":
            img = _checker(size, palette, rng)
        elif kind == "noise-palette":
            img = _noise_palette(size, palette, rng)
        elif kind == "blobs":
            img = _blobs(size, palette, rng)
        elif kind == "constant":
            img = np.empty((size, size, 3), dtype=np.uint8)
            img[:] = rng.integers(0, 256, size=3)
        else:
            img = _shapes(size, rng)
        images.append(to_unit(img).transpose(2, 0, 1))
    return torch.from_numpy(np.stack(images))


def palette_of(kind: str, seed: int = 0, hue: float | None = None, n_colors: int | None = None) -> np.ndarray:
    """The 8-bit palette :func:`make_texture_dataset` would use for the same arguments."""
    if kind in DOMAINS:
        dom = DOMAINS[kind]
        hue = dom.hue if hue is None else hue
        n_colors = dom.n_colors if n_colors is None else n_colors
    rng = np.random.default_rng(seed)
    if hue is None:
        hue = float(rng.uniform(0, 360))
    return make_palette(hue, n_colors or 3, rng)


def default_training_set(seed: int = 0, size: int = 32, per_domain: int = 8) -> torch.Tensor:
    """Every named domain plus content-like shape images."""
    parts = [make_texture_dataset(name, per_domain, seed + i, size) for i, name in enumerate(DOMAINS)]
    parts.append(make_texture_dataset("shapes", per_domain * 2, seed + 100, size))
    return torch.cat(parts)


def mean_hue(image: torch.Tensor) -> float:
    """Circular mean hue in degrees, saturation-weighted, of a ``(3, H, W)`` image in [-1, 1]."""
    rgb = ((image.detach().cpu().numpy().transpose(1, 2, 0) + 1.0) / 2.0).reshape(-1, 3)
    hs = np.array([colorsys.rgb_to_hsv(*px)[:2] for px in rgb])
    ang = np.deg2rad(hs[:, 0] * 360.0)
    w = hs[:, 1]
    return float(np.rad2deg(np.arctan2((w * np.sin(ang)).sum(), (w * np.cos(ang)).sum())) % 360.0)
