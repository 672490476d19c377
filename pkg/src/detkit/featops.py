"""Feature-map operators: DropBlock masks, CoordConv channels, SPP pooling.

Feature maps are ``(C, H, W)`` float32 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def as_feature_map(fm) -> np.ndarray:
    fm = np.asarray(fm, dtype=np.float32)
    if fm.ndim != 3 or min(fm.shape) < 1:
        raise ValueError(f"feature map must be (C, H, W) with all dims >= 1, got {fm.shape}")
    return fm


@dataclass(frozen=True)
class DropBlockConfig:
    block_size: int = 3
    keep_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ValueError("block_size must be a positive odd integer")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")


def dropblock_gamma(height: int, width: int, block_size: int, keep_prob: float) -> float:
    """Seed rate chosen so that roughly ``1 - keep_prob`` of the units drop."""
    valid = (height - block_size + 1) * (width - block_size + 1)
    return (1.0 - keep_prob) / block_size ** 2 * (height * width) / valid


def dropblock_mask(height: int, width: int, cfg: DropBlockConfig = DropBlockConfig()):
    """Binary keep-mask and the renormalization factor ``size / kept``.

    Seeds are Bernoulli(gamma) over every cell; each seed zeroes the
    ``block_size`` square centered on it, clipped at the borders.
    """
    bs = cfg.block_size
    if height < bs or width < bs:
        raise ValueError(f"feature map {height}x{width} smaller than block_size {bs}")
    if cfg.keep_prob == 1.0:
        return np.ones((height, width), dtype=np.float32), 1.0
    gamma = dropblock_gamma(height, width, bs, cfg.keep_prob)
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.random((height, width)) < gamma
    r = bs // 2
    padded = np.pad(seeds, r, constant_values=False)
    dropped = sliding_window_view(padded, (bs, bs)).any(axis=(-1, -2))
    mask = (~dropped).astype(np.float32)
    kept = float(mask.sum())
    scale = mask.size / kept if kept > 0 else 0.0
    return mask, scale


def coordconv_augment(fm) -> np.ndarray:
    """Append x and y coordinate channels spanning [-1, 1]."""
    fm = as_feature_map(fm)
    _, h, w = fm.shape
    xs = np.linspace(-1.0, 1.0, w, dtype=np.float32)
    ys = np.linspace(-1.0, 1.0, h, dtype=np.float32)
    xx = np.broadcast_to(xs[None, :], (h, w))
    yy = np.broadcast_to(ys[:, None], (h, w))
    return np.concatenate([fm, xx[None], yy[None]], axis=0)


@dataclass(frozen=True)
class SppConfig:
    kernels: tuple[int, ...] = (1, 5, 9, 13)

    def __post_init__(self):
        if not self.kernels or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError("SPP kernels must be positive odd integers")


def max_pool_same(fm: np.ndarray, k: int) -> np.ndarray:
    """Stride-1 ``k x k`` max pool; out-of-bounds positions never win."""
    if k == 1:
        return fm.copy()
    r = k // 2
    padded = np.pad(fm, ((0, 0), (r, r), (r, r)), constant_values=-np.inf)
    return sliding_window_view(padded, (k, k), axis=(1, 2)).max(axis=(-1, -2)).astype(fm.dtype)


def spp_concat(fm, cfg: SppConfig = SppConfig()) -> np.ndarray:
    fm = as_feature_map(fm)
    return np.concatenate([max_pool_same(fm, k) for k in cfg.kernels], axis=0)
