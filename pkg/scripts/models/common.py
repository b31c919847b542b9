"""
Layers shared by LREN, SIRN and the diffusion networks.
"""

from typing import Callable, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from lib.errors import DimensionError


class LayerNorm2d(nn.Module):
    """Layer norm over channels, computed independently at every pixel."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        y = (x - mu) / torch.sqrt(var + self.eps)
        return y * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Space-to-depth: (..., C, H, W) -> (..., C*r*r, H/r, W/r).

    Output channel c*r*r + dy*r + dx holds source offset (dy, dx) of channel c.
    """
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise DimensionError(f"Input {h}x{w} is not divisible by unshuffle factor {r}")
    if r == 1:
        return x
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Depth-to-space inverse of pixel_unshuffle."""
    if x.shape[-3] % (r * r):
        raise DimensionError(f"Channels {x.shape[-3]} not divisible by {r * r}")
    if r == 1:
        return x
    return F.pixel_shuffle(x, r)


class ResBlock(nn.Module):
    """conv3x3 -> LeakyReLU -> conv3x3, plus identity skip."""

    def __init__(self, channels: int, negative_slope: float = 0.2):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


def per_view(fn: Callable[[torch.Tensor], torch.Tensor], left: torch.Tensor,
             right: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Apply one shared-weight network to each view separately."""
    if left.shape != right.shape:
        raise DimensionError(f"View shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
    return fn(left), fn(right)
