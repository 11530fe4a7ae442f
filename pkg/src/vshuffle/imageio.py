"""8-bit RGB PNG input/output with [-1, 1] normalization."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_tensor(rgb8: np.ndarray) -> torch.Tensor:
    if rgb8.dtype != np.uint8 or rgb8.ndim != 3 or rgb8.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) uint8 array, got {rgb8.dtype} {rgb8.shape}")
    return torch.from_numpy(rgb8.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    x = image.detach().clamp(-1.0, 1.0).cpu().numpy().transpose(1, 2, 0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def read_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        return to_tensor(np.asarray(im.convert("RGB"), dtype=np.uint8))


def write_png(path: str | Path, rgb8: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb8), mode="RGB").save(path, format="PNG")
