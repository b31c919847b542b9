"""
Latent representation extraction network (LREN).

Maps an HQ view to a single-channel latent high-frequency map at LQ resolution:
pixel-unshuffle -> conv -> residual blocks -> conv/LeakyReLU compression -> 1-channel conv.
In "vector" guidance mode the compressed features are pooled into a C-length vector,
carried as a 1 x C latent map so the diffusion chain and SIRN treat both modes alike.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from lib.datapipe import StereoImagePair
from lib.errors import ConfigError, DimensionError, ParameterError
from models.common import ResBlock, per_view, pixel_unshuffle


class View(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass
class LatentHF:
    """Per-view latent map; `z` is H x W (or B x H x W)."""

    z: torch.Tensor
    view: View

    def __post_init__(self):
        if not torch.isfinite(self.z).all():
            raise ParameterError(f"{self.view.value} latent contains non-finite values")


@dataclass(frozen=True)
class LrenParams:
    unshuffle_factor: int = 4
    num_res_blocks: int = 4
    width: int = 64
    compress_channels: Tuple[int, ...] = (32, 16)
    guidance: str = "lhfr"
    vector_length: int = 256

    def __post_init__(self):
        object.__setattr__(self, "compress_channels", tuple(self.compress_channels))
        if self.unshuffle_factor not in (1, 2, 4):
            raise ConfigError(f"unshuffle_factor must be 1, 2 or 4, got {self.unshuffle_factor}")
        if self.width < 1 or self.num_res_blocks < 0 or any(c < 1 for c in self.compress_channels):
            raise ConfigError("LREN widths must be positive")
        if self.guidance not in ("lhfr", "vector"):
            raise ConfigError(f"guidance must be 'lhfr' or 'vector', got '{self.guidance}'")


class LREN(nn.Module):
    def __init__(self, params: LrenParams):
        super().__init__()
        self.params = params
        r = params.unshuffle_factor
        self.conv_in = nn.Conv2d(3 * r * r, params.width, 3, 1, 1)
        self.body = nn.Sequential(*[ResBlock(params.width) for _ in range(params.num_res_blocks)])

        layers = []
        prev = params.width
        for channels in params.compress_channels:
            layers += [nn.Conv2d(prev, channels, 3, 1, 1), nn.LeakyReLU(0.2)]
            prev = channels
        self.compress = nn.Sequential(*layers)
        if params.guidance == "vector":
            self.conv_out = nn.Conv2d(prev, params.vector_length, 1)
        else:
            self.conv_out = nn.Conv2d(prev, 1, 3, 1, 1, bias=True)

    def forward(self, hq: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W -> B x 1 x H/r x W/r (or B x 1 x 1 x C in vector mode)."""
        x = pixel_unshuffle(hq, self.params.unshuffle_factor)
        x = self.conv_in(x)
        x = self.body(x)
        x = self.compress(x)
        if self.params.guidance == "vector":
            v = self.conv_out(F.adaptive_avg_pool2d(x, 1))
            return v.flatten(1).unsqueeze(1).unsqueeze(1)
        return self.conv_out(x)

    @classmethod
    def from_weights(cls, params: LrenParams, weights: Dict[str, torch.Tensor]) -> "LREN":
        net = cls(params)
        net.load_state_dict(weights)
        return net


def extract_lhfr(hq_pair: StereoImagePair, lren: LREN,
                 params: Optional[LrenParams] = None) -> Tuple[LatentHF, LatentHF]:
    """Shared-weight LHFR extraction for both views of an HQ pair."""
    params = params or lren.params
    r = params.unshuffle_factor
    if hq_pair.height % r or hq_pair.width % r:
        raise DimensionError(f"HQ {hq_pair.height}x{hq_pair.width} not divisible by r={r}")

    single = hq_pair.left.dim() == 3
    left = hq_pair.left.unsqueeze(0) if single else hq_pair.left
    right = hq_pair.right.unsqueeze(0) if single else hq_pair.right
    z_left, z_right = per_view(lren, left, right)
    z_left, z_right = z_left.squeeze(1), z_right.squeeze(1)
    if single:
        z_left, z_right = z_left.squeeze(0), z_right.squeeze(0)
    return LatentHF(z_left, View.LEFT), LatentHF(z_right, View.RIGHT)
