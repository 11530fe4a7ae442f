"""scikit-learn style wrappers: fit on style images, transform content images."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .denoiser import MicroUNet
from .transfer import DEFAULT_BLOCKS, InversionCache, TransferConfig, run


def check_images(X, channels: int = 3, size: Optional[int] = None) -> torch.Tensor:
    """Validate an ``(N, c, H, W)`` batch in [-1, 1] and return it as float32 torch."""
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    arr = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True, ensure_min_samples=1)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != channels or arr.shape[2] != arr.shape[3]:
        raise ValueError(f"expected square images shaped (N, {channels}, H, W), got {arr.shape}")
    if size is not None and arr.shape[2] != size:
        raise ValueError(f"expected {size}x{size} images, got {arr.shape[2]}x{arr.shape[3]}")
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError("pixel values must lie in [-1, 1]")
    return torch.from_numpy(np.ascontiguousarray(arr))


class StyleTransfer(TransformerMixin, BaseEstimator):
    """Stylize content images toward the style images given to :meth:`fit`.

    ``fit`` inverts the style images once; ``transform`` runs the selected
    pipeline for each content image and returns stylized images in [-1, 1].
    """

    def __init__(
        self,
        model: Optional[MicroUNet] = None,
        method: str = "vshuffle",
        T: int = 200,
        window=(0.2, 0.9),
        alpha: float = 0.4,
        beta: float = 0.24,
        gamma: float = 0.75,
        tau: Optional[float] = None,
        m: int = 1,
        inner_steps: int = 10,
        lr: float = 0.05,
        blocks=DEFAULT_BLOCKS,
        seed: int = 0,
        axis: str = "s",
    ):
        self.model = model
        self.method = method
        self.T = T
        self.window = window
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.tau = tau
        self.m = m
        self.inner_steps = inner_steps
        self.lr = lr
        self.blocks = blocks
        self.seed = seed
        self.axis = axis

    def _config(self, n: int) -> TransferConfig:
        return TransferConfig(
            method=self.method, T=self.T, window=tuple(self.window), alpha=self.alpha, beta=self.beta,
            gamma=self.gamma, tau=self.tau, m=self.m, n=n, inner_steps=self.inner_steps, lr=self.lr,
            blocks=tuple(self.blocks), seed=self.seed, axis=self.axis,
        )

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("StyleTransfer needs a trained model")
        styles = check_images(X, self.model.config.channels, self.model.config.image_size)
        if self.method != "vshuffle" and styles.shape[0] != 1:
            raise ValueError(f"method {self.method} takes exactly one style image, got {styles.shape[0]}")
        self.config_ = self._config(styles.shape[0])
        self.styles_ = list(styles)
        self.cache_ = InversionCache()
        sched = self.config_.schedule()
        for i, s in enumerate(self.styles_):
            self.cache_.invert(self.model, s, sched, f"style{i}")
        self.n_styles_ = len(self.styles_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "styles_")
        content = check_images(X, self.model.config.channels, self.model.config.image_size)
        outs = [run(self.model, c, self.styles_, self.config_, self.cache_).image for c in content]
        return torch.stack(outs).numpy()
