"""Shared image conventions and small conversion helpers.

An image is a float64/float32 numpy array of shape (H, W, C) with values in
[0, 1]. Model-facing code rescales to [-1, 1] internally; everything public
stays in [0, 1].
"""

from __future__ import annotations

import numpy as np
import torch


def check_image(x: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an (H, W, C) float image in [0, 1] and return it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if x.min() < -1e-9 or x.max() > 1 + 1e-9:
        raise ValueError(
            f"{name} values must lie in [0, 1], got range "
            f"[{x.min():.4g}, {x.max():.4g}]"
        )
    return np.clip(x, 0.0, 1.0)


def to_grayscale(x: np.ndarray) -> np.ndarray:
    """Collapse (H, W, C) to (H, W) by luma weighting (RGB) or channel mean."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.shape[2] == 3:
        return x @ np.array([0.299, 0.587, 0.114])
    return x.mean(axis=2)


def to_unit(x_internal: torch.Tensor) -> torch.Tensor:
    """Map model-space values in [-1, 1] to image space, clamped to [0, 1]."""
    return ((x_internal + 1.0) / 2.0).clamp(0.0, 1.0)


def to_internal(x_unit: torch.Tensor) -> torch.Tensor:
    """Map [0, 1] image values to the model's [-1, 1] convention."""
    return x_unit * 2.0 - 1.0


def hwc_to_tensor(x: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, C) numpy image -> (C, H, W) torch tensor, same value range."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))).to(dtype)


def tensor_to_hwc(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) torch tensor -> (H, W, C) float64 numpy image."""
    return x.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)


def stack_images(
    images: list[np.ndarray], dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Stack a list of (H, W, C) images into an (N, C, H, W) tensor."""
    if not images:
        raise ValueError("empty image list")
    return torch.stack([hwc_to_tensor(im, dtype) for im in images])


def mix_seed(*parts: int) -> int:
    """Deterministically mix integers into a 63-bit seed (splitmix-style)."""
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc ^= (int(p) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        acc = (acc * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        acc ^= acc >> 31
    return acc & 0x7FFFFFFFFFFFFFFF
