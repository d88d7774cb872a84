"""Depth-wise semantics adaption (SA) convolution.

One k x k kernel per channel, stride 1, zero padding (k-1)/2, no bias.
Channels never mix, so the module can sit between a frozen conv and its
batch-norm without changing any shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class SaKernel:
    """Plain-data SA weights, shape (channels, k, k)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValueError(f"SA weights must be (M, k, k), got {w.shape}")
        if w.shape[1] % 2 == 0:
            raise ValueError(f"SA kernel size must be odd, got {w.shape[1]}")
        self.weights = w

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[1]

    stride = 1


def _check_kernel_size(kernel_size: int) -> None:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")


def sa_init_identity(channels: int, kernel_size: int = 5, dtype=np.float32) -> SaKernel:
    _check_kernel_size(kernel_size)
    w = np.zeros((channels, kernel_size, kernel_size), dtype=dtype)
    c = kernel_size // 2
    w[:, c, c] = 1.0
    return SaKernel(w)


def sa_param_count(channels: int, kernel_size: int) -> int:
    if channels < 1 or kernel_size < 1:
        raise ValueError("channels and kernel_size must be positive")
    return channels * kernel_size * kernel_size


def depthwise_conv(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Per-channel cross-correlation of ``x`` (B, M, H, W) with ``weight`` (M, k, k)."""
    m, k = weight.shape[0], weight.shape[-1]
    if x.shape[1] != m:
        raise ValueError(f"feature map has {x.shape[1]} channels, kernel has {m}")
    return F.conv2d(x, weight.reshape(m, 1, k, k), bias=None, stride=1,
                    padding=k // 2, groups=m)


def sa_forward(kernel: SaKernel, feature_map) -> np.ndarray:
    """Apply ``kernel`` to an (M, H, W) or (B, M, H, W) array."""
    x = np.asarray(feature_map)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (M, H, W) or (B, M, H, W), got shape {x.shape}")
    dtype = np.result_type(x.dtype, kernel.weights.dtype)
    with torch.no_grad():
        y = depthwise_conv(torch.from_numpy(np.ascontiguousarray(x, dtype=dtype)),
                           torch.from_numpy(np.ascontiguousarray(kernel.weights, dtype=dtype)))
    y = y.numpy()
    return y[0] if squeeze else y


class SemanticsAdaption(nn.Module):
    """Trainable SA layer; identity-initialized."""

    def __init__(self, channels: int, kernel_size: int = 5):
        super().__init__()
        _check_kernel_size(kernel_size)
        self.channels = channels
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.from_numpy(sa_init_identity(channels, kernel_size).weights))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return depthwise_conv(x, self.weight)

    def reset_identity(self) -> None:
        with torch.no_grad():
            self.weight.copy_(torch.from_numpy(sa_init_identity(self.channels, self.kernel_size).weights))

    def export(self) -> SaKernel:
        return SaKernel(self.weight.detach().cpu().numpy().copy())

    def load(self, kernel: SaKernel) -> None:
        if kernel.weights.shape != tuple(self.weight.shape):
            raise ValueError(f"SA shape mismatch: {kernel.weights.shape} vs {tuple(self.weight.shape)}")
        with torch.no_grad():
            self.weight.copy_(torch.from_numpy(np.asarray(kernel.weights, dtype=np.float32)))

    def extra_repr(self) -> str:
        return f"{self.channels}, kernel_size={self.kernel_size}"
