"""Per-domain batch normalization.

y = gamma * (x - mu) / sqrt(var + eps) + beta, with batch statistics in
training and stored running statistics in evaluation. The batch variance is
the biased (population) estimator, used both to normalize and to update the
running average.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass
class BnLayerState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        vecs = [np.asarray(v) for v in (self.running_mean, self.running_var, self.gamma, self.beta)]
        if any(v.ndim != 1 for v in vecs) or len({v.shape[0] for v in vecs}) != 1:
            raise ValueError("BN vectors must be 1-D with identical length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(vecs[1] < 0):
            raise ValueError("running_var must be nonnegative")
        self.running_mean, self.running_var, self.gamma, self.beta = vecs

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def fresh(cls, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM,
              dtype=np.float32) -> "BnLayerState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype),
                   np.ones(channels, dtype), np.zeros(channels, dtype), eps, momentum)

    def copy(self) -> "BnLayerState":
        return replace(self, running_mean=self.running_mean.copy(), running_var=self.running_var.copy(),
                       gamma=self.gamma.copy(), beta=self.beta.copy())


def _reduce_dims(x: torch.Tensor) -> list[int]:
    return [0] + list(range(2, x.dim()))


def _bcast(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return v.reshape((1, -1) + (1,) * (x.dim() - 2))


def batch_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    dims = _reduce_dims(x)
    n = x.numel() // x.shape[1]
    if n < 2:
        raise ValueError("batch norm needs at least 2 values per channel in training mode")
    mean = x.mean(dim=dims)
    var = ((x - _bcast(mean, x)) ** 2).mean(dim=dims)
    return mean, var


def normalize(x, mean, var, gamma, beta, eps):
    return _bcast(gamma, x) * (x - _bcast(mean, x)) / torch.sqrt(_bcast(var, x) + eps) + _bcast(beta, x)


def bn_forward_train(state: BnLayerState, x) -> tuple[np.ndarray, BnLayerState]:
    """Training-mode forward on an array; returns the output and the updated state."""
    xt = torch.from_numpy(np.array(x))
    if not torch.isfinite(xt).all():
        raise ValueError("non-finite input to batch norm")
    if xt.shape[1] != state.channels:
        raise ValueError(f"input has {xt.shape[1]} channels, state has {state.channels}")
    mean, var = batch_stats(xt)
    g = torch.as_tensor(state.gamma, dtype=xt.dtype)
    b = torch.as_tensor(state.beta, dtype=xt.dtype)
    y = normalize(xt, mean, var, g, b, state.eps)
    m = state.momentum
    rm = (1 - m) * state.running_mean + m * mean.numpy().astype(state.running_mean.dtype)
    rv = (1 - m) * state.running_var + m * var.numpy().astype(state.running_var.dtype)
    new = replace(state, running_mean=rm.astype(state.running_mean.dtype),
                  running_var=rv.astype(state.running_var.dtype),
                  gamma=state.gamma.copy(), beta=state.beta.copy())
    return y.numpy(), new


def bn_forward_eval(state: BnLayerState, x) -> np.ndarray:
    xt = torch.from_numpy(np.array(x))
    if not (np.all(np.isfinite(state.running_mean)) and np.all(np.isfinite(state.running_var))):
        raise ValueError("non-finite stored statistics")
    dt = xt.dtype
    return normalize(xt, torch.as_tensor(state.running_mean, dtype=dt), torch.as_tensor(state.running_var, dtype=dt),
                     torch.as_tensor(state.gamma, dtype=dt), torch.as_tensor(state.beta, dtype=dt),
                     state.eps).numpy()


class DomainBatchNorm(nn.Module):
    """Batch norm over (B, C, ...) tensors whose full state can be swapped per domain."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            mean, var = batch_stats(x)
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mean.detach())
                self.running_var.mul_(1 - m).add_(m * var.detach())
            return normalize(x, mean, var, self.gamma, self.beta, self.eps)
        return normalize(x, self.running_mean, self.running_var, self.gamma, self.beta, self.eps)

    def export(self) -> BnLayerState:
        return BnLayerState(self.running_mean.detach().cpu().numpy().copy(),
                            self.running_var.detach().cpu().numpy().copy(),
                            self.gamma.detach().cpu().numpy().copy(),
                            self.beta.detach().cpu().numpy().copy(),
                            self.eps, self.momentum)

    def load(self, state: BnLayerState) -> None:
        if state.channels != self.channels:
            raise ValueError(f"BN channel mismatch: {state.channels} vs {self.channels}")
        with torch.no_grad():
            for name in ("running_mean", "running_var", "gamma", "beta"):
                getattr(self, name).copy_(torch.from_numpy(np.asarray(getattr(state, name), dtype=np.float32)))
        self.eps = state.eps
        self.momentum = state.momentum

    def extra_repr(self) -> str:
        return f"{self.channels}, eps={self.eps}, momentum={self.momentum}"
