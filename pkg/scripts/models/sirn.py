"""
Stereo image restoration network (SIRN).

A stack of channel interaction blocks (CIBs). Each CIB computes one transposed
(channel x channel) attention map from the pixels of both views and applies it to each
view's values, followed by a gated-Dconv feed-forward network. Latent guidance enters
every block through a depth-indexed position encoding and a spatial modulation of the
normalized features that feed Q/K/V.

RDB and NAFB blocks are available as drop-in replacements for the block-type ablation.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from lib.datapipe import StereoImagePair, bicubic_upsample
from lib.errors import ConfigError, DimensionError, ParameterError
from models.common import LayerNorm2d, per_view, pixel_shuffle

BLOCK_TYPES = ("cib", "rdb", "nafb")
GUIDANCE_KINDS = ("lhfr", "vector")


# =============================================================================
# Configuration
# =============================================================================

@dataclass(frozen=True)
class CibParams:
    channels: int = 256
    heads: int = 8
    ffn_expansion: float = 2.66
    qk_l2norm: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass(frozen=True)
class SirnConfig:
    num_cibs: int = 8
    channels: int = 256
    heads: int = 8
    scale: int = 4
    use_lhfr: bool = True
    use_pe: bool = True
    block_type: str = "cib"
    guidance: str = "lhfr"
    ffn_expansion: float = 2.66
    qk_l2norm: bool = False

    def __post_init__(self):
        if self.num_cibs < 1:
            raise ConfigError(f"num_cibs must be >= 1, got {self.num_cibs}")
        if self.scale not in (1, 2, 4):
            raise ConfigError(f"scale must be 1, 2 or 4, got {self.scale}")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}, got '{self.block_type}'")
        if self.guidance not in GUIDANCE_KINDS:
            raise ConfigError(f"guidance must be one of {GUIDANCE_KINDS}, got '{self.guidance}'")
        self.cib_params()

    def cib_params(self) -> CibParams:
        return CibParams(self.channels, self.heads, self.ffn_expansion, self.qk_l2norm)


# =============================================================================
# Channel Interaction Block
# =============================================================================

class ChannelAttention(nn.Module):
    """Transposed attention with a channel map shared by both views."""

    def __init__(self, p: CibParams):
        super().__init__()
        c = p.channels
        self.heads = p.heads
        self.qk_l2norm = p.qk_l2norm
        # w = exp(s); s = 0 gives w = 1
        self.log_temperature = nn.Parameter(torch.zeros(p.heads, 1, 1))
        self.qkv = nn.Conv2d(c, c * 3, kernel_size=1, bias=False)
        self.qkv_dwconv = nn.Conv2d(c * 3, c * 3, kernel_size=3, stride=1, padding=1, groups=c * 3, bias=False)
        self.project_out = nn.Conv2d(c, c, kernel_size=1, bias=False)

    def _qkv(self, u: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        q, k, v = self.qkv_dwconv(self.qkv(u)).chunk(3, dim=1)
        return tuple(rearrange(t, "b (head c) h w -> b head c (h w)", head=self.heads) for t in (q, k, v))

    def attend(self, u_left: torch.Tensor, u_right: torch.Tensor):
        """Return (Y_left, Y_right, A) before the output projection."""
        _, _, h, w = u_left.shape
        q_l, k_l, v_l = self._qkv(u_left)
        q_r, k_r, v_r = self._qkv(u_right)

        q = torch.cat([q_l, q_r], dim=-1)
        k = torch.cat([k_l, k_r], dim=-1)
        if self.qk_l2norm:
            q = F.normalize(q, dim=-1)
            k = F.normalize(k, dim=-1)

        attn = (q @ k.transpose(-2, -1)) / torch.exp(self.log_temperature)
        attn = attn.softmax(dim=-1)

        y_l = rearrange(attn @ v_l, "b head c (h w) -> b (head c) h w", head=self.heads, h=h, w=w)
        y_r = rearrange(attn @ v_r, "b head c (h w) -> b (head c) h w", head=self.heads, h=h, w=w)
        return y_l, y_r, attn

    def forward(self, u_left: torch.Tensor, u_right: torch.Tensor):
        y_l, y_r, attn = self.attend(u_left, u_right)
        return self.project_out(y_l), self.project_out(y_r), attn


class SpatialModulation(nn.Module):
    """X' = W1(Z') * LN(X) + W2(Z'), bias-free so zero guidance gives zero output."""

    def __init__(self, channels: int):
        super().__init__()
        self.w1 = nn.Conv2d(channels, channels, kernel_size=1, bias=False)
        self.w2 = nn.Conv2d(channels, channels, kernel_size=1, bias=False)

    def forward(self, x_norm: torch.Tensor, zp: torch.Tensor) -> torch.Tensor:
        if zp.shape != x_norm.shape:
            raise DimensionError(f"Guidance {tuple(zp.shape)} does not match features {tuple(x_norm.shape)}")
        return self.w1(zp) * x_norm + self.w2(zp)


class GDFN(nn.Module):
    """Gated-Dconv feed-forward network with its own pre-norm and residual."""

    def __init__(self, channels: int, expansion: float):
        super().__init__()
        hidden = int(channels * expansion)
        self.norm = LayerNorm2d(channels)
        self.project_in = nn.Conv2d(channels, hidden * 2, kernel_size=1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, kernel_size=3, stride=1, padding=1,
                                groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, channels, kernel_size=1, bias=False)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        x1, x2 = self.dwconv(self.project_in(self.norm(u))).chunk(2, dim=1)
        return u + self.project_out(F.gelu(x1) * x2)


class CIB(nn.Module):
    def __init__(self, p: CibParams, guided: bool = True):
        super().__init__()
        self.norm1 = LayerNorm2d(p.channels)
        self.attn = ChannelAttention(p)
        self.modulation = SpatialModulation(p.channels) if guided else None
        self.ffn = GDFN(p.channels, p.ffn_expansion)

    def attention_input(self, x: torch.Tensor, zp: Optional[torch.Tensor]) -> torch.Tensor:
        u = self.norm1(x)
        if zp is None:
            return u
        if self.modulation is None:
            raise ConfigError("Block was built without a guidance path but received guidance")
        return self.modulation(u, zp)

    def forward(self, x_left: torch.Tensor, x_right: torch.Tensor, zp_left: Optional[torch.Tensor] = None,
                zp_right: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if (zp_left is None) != (zp_right is None):
            raise ConfigError("Guidance must be given for both views or neither")
        if x_left.shape != x_right.shape:
            raise DimensionError(f"View features differ: {tuple(x_left.shape)} vs {tuple(x_right.shape)}")
        y_l, y_r, _ = self.attn(self.attention_input(x_left, zp_left), self.attention_input(x_right, zp_right))
        return self.ffn(y_l + x_left), self.ffn(y_r + x_right)


# =============================================================================
# Ablation blocks (per-view body + concat fusion across views)
# =============================================================================

class ResidualDenseBlock(nn.Module):
    def __init__(self, channels: int, growth: Optional[int] = None, layers: int = 3):
        super().__init__()
        growth = growth or max(channels // 2, 1)
        self.convs = nn.ModuleList(
            [nn.Conv2d(channels + i * growth, growth, 3, 1, 1) for i in range(layers)]
        )
        self.fuse = nn.Conv2d(channels + layers * growth, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.fuse(torch.cat(feats, dim=1))


class SimpleGate(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1, x2 = x.chunk(2, dim=1)
        return x1 * x2


class NAFBlock(nn.Module):
    """Nonlinear-activation-free block: gated depth-wise conv branch plus gated FFN."""

    def __init__(self, channels: int, dw_expand: int = 2, ffn_expand: int = 2):
        super().__init__()
        dw = channels * dw_expand
        ffn = channels * ffn_expand
        self.norm1 = LayerNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, dw, 1)
        self.conv2 = nn.Conv2d(dw, dw, 3, 1, 1, groups=dw)
        self.sg = SimpleGate()
        self.sca = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(dw // 2, dw // 2, 1))
        self.conv3 = nn.Conv2d(dw // 2, channels, 1)
        self.norm2 = LayerNorm2d(channels)
        self.conv4 = nn.Conv2d(channels, ffn, 1)
        self.conv5 = nn.Conv2d(ffn // 2, channels, 1)
        self.beta = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.gamma = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.sg(self.conv2(self.conv1(self.norm1(x))))
        h = self.conv3(h * self.sca(h))
        y = x + h * self.beta
        h = self.conv5(self.sg(self.conv4(self.norm2(y))))
        return y + h * self.gamma


class CrossViewFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Conv2d(channels * 2, channels, kernel_size=1)

    def forward(self, x_left: torch.Tensor, x_right: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return (x_left + self.fuse(torch.cat([x_left, x_right], dim=1)),
                x_right + self.fuse(torch.cat([x_right, x_left], dim=1)))


class PerViewBlock(nn.Module):
    """RDB or NAFB applied per view, guidance added as a modulated residual."""

    def __init__(self, kind: str, channels: int, guided: bool = True):
        super().__init__()
        self.norm = LayerNorm2d(channels) if guided else None
        self.modulation = SpatialModulation(channels) if guided else None
        self.body = ResidualDenseBlock(channels) if kind == "rdb" else NAFBlock(channels)
        self.fusion = CrossViewFusion(channels)

    def _run(self, x: torch.Tensor, zp: Optional[torch.Tensor]) -> torch.Tensor:
        if zp is not None:
            if self.modulation is None:
                raise ConfigError("Block was built without a guidance path but received guidance")
            x = x + self.modulation(self.norm(x), zp)
        return self.body(x)

    def forward(self, x_left, x_right, zp_left=None, zp_right=None):
        return self.fusion(self._run(x_left, zp_left), self._run(x_right, zp_right))


# =============================================================================
# Position encoding
# =============================================================================

class PositionEncoding(nn.Module):
    """1x1 conv over [guidance repeated to C channels, constant depth-index channel]."""

    def __init__(self, channels: int, use_pe: bool = True):
        super().__init__()
        self.use_pe = use_pe
        self.conv = nn.Conv2d(channels + 1 if use_pe else channels, channels, kernel_size=1, bias=False)

    def forward(self, guidance: torch.Tensor, depth_index: int) -> torch.Tensor:
        if depth_index < 0:
            raise ParameterError(f"depth_index must be >= 0, got {depth_index}")
        if self.use_pe:
            index = torch.full_like(guidance[:, :1], float(depth_index))
            guidance = torch.cat([guidance, index], dim=1)
        return self.conv(guidance)


def expand_guidance(z: torch.Tensor, channels: int, height: int, width: int, kind: str = "lhfr") -> torch.Tensor:
    """Lift a B x 1 x h x w latent to B x C x H x W guidance features.

    LHFR maps are copied C times along channels; vector latents (B x 1 x 1 x C) are
    broadcast over the spatial grid.
    """
    if z.dim() == 3:
        z = z.unsqueeze(1)
    if kind == "vector":
        if z.shape[-2:] != (1, channels):
            raise DimensionError(f"Vector latent must be 1 x {channels}, got {tuple(z.shape[-2:])}")
        return z.reshape(z.shape[0], channels, 1, 1).expand(-1, -1, height, width)
    if z.shape[-2:] != (height, width):
        raise DimensionError(f"LHFR {tuple(z.shape[-2:])} does not match LQ features {(height, width)}")
    return z.expand(-1, channels, -1, -1)


def encode_position(z: torch.Tensor, depth_index: int, channels: int, pe: PositionEncoding) -> torch.Tensor:
    """Encode an H x W (or B x 1 x H x W) latent for the CIB at `depth_index`.

    Returns C x H x W (or B x C x H x W), channel-first.
    """
    single = z.dim() == 2
    z4 = z.reshape(1, 1, *z.shape) if single else (z.unsqueeze(1) if z.dim() == 3 else z)
    out = pe(expand_guidance(z4, channels, z4.shape[-2], z4.shape[-1]), depth_index)
    return out.squeeze(0) if single else out


# =============================================================================
# Functional views of the block (used by tests and the selftest)
# =============================================================================

def channel_attention(x_left: torch.Tensor, x_right: torch.Tensor, cib: CIB):
    """(Y_left, Y_right, A) from layer-normed inputs; A has shape B x head x C^ x C^."""
    return cib.attn.attend(cib.norm1(x_left), cib.norm1(x_right))


def modulate(x: torch.Tensor, zp: torch.Tensor, cib: CIB) -> torch.Tensor:
    if cib.modulation is None:
        raise ConfigError("Block was built without a guidance path")
    return cib.modulation(cib.norm1(x), zp)


def cib_forward(x_left, x_right, zp_left, zp_right, cib: CIB):
    return cib(x_left, x_right, zp_left, zp_right)


# =============================================================================
# SIRN
# =============================================================================

class SirnOutput(NamedTuple):
    left: torch.Tensor
    right: torch.Tensor
    feat_left: torch.Tensor
    feat_right: torch.Tensor


class SIRN(nn.Module):
    def __init__(self, cfg: SirnConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        guided = cfg.use_lhfr
        self.shallow = nn.Conv2d(3, c, 3, 1, 1)
        self.pe = PositionEncoding(c, cfg.use_pe) if guided else None
        if cfg.block_type == "cib":
            p = cfg.cib_params()
            self.blocks = nn.ModuleList([CIB(p, guided) for _ in range(cfg.num_cibs)])
        else:
            self.blocks = nn.ModuleList([PerViewBlock(cfg.block_type, c, guided) for _ in range(cfg.num_cibs)])
        self.head = nn.Conv2d(c, 3 * cfg.scale * cfg.scale, 3, 1, 1)

    def _reconstruct(self, x: torch.Tensor, lq: torch.Tensor) -> torch.Tensor:
        return pixel_shuffle(self.head(x), self.cfg.scale) + bicubic_upsample(lq, self.cfg.scale)

    def forward(self, lq_left: torch.Tensor, lq_right: torch.Tensor, z_left: Optional[torch.Tensor] = None,
                z_right: Optional[torch.Tensor] = None) -> SirnOutput:
        cfg = self.cfg
        if cfg.use_lhfr and (z_left is None or z_right is None):
            raise ConfigError("SIRN was configured with use_lhfr but no latent guidance was given")

        feat_l, feat_r = per_view(self.shallow, lq_left, lq_right)
        x_l, x_r = feat_l, feat_r
        g_l = g_r = None
        if cfg.use_lhfr:
            _, _, h, w = feat_l.shape
            g_l = expand_guidance(z_left, cfg.channels, h, w, cfg.guidance)
            g_r = expand_guidance(z_right, cfg.channels, h, w, cfg.guidance)

        for depth, block in enumerate(self.blocks):
            zp_l = zp_r = None
            if self.pe is not None:
                zp_l, zp_r = self.pe(g_l, depth), self.pe(g_r, depth)
            x_l, x_r = block(x_l, x_r, zp_l, zp_r)

        return SirnOutput(self._reconstruct(x_l, lq_left), self._reconstruct(x_r, lq_right), feat_l, feat_r)


def restore(lq_pair: StereoImagePair, z_left: Optional[torch.Tensor], z_right: Optional[torch.Tensor],
            sirn: SIRN) -> StereoImagePair:
    """Inference-time restoration; output clamped to [0, 1]."""
    single = lq_pair.left.dim() == 3
    lq_l = lq_pair.left.unsqueeze(0) if single else lq_pair.left
    lq_r = lq_pair.right.unsqueeze(0) if single else lq_pair.right
    if single and z_left is not None:
        z_left, z_right = z_left.reshape(1, 1, *z_left.shape[-2:]), z_right.reshape(1, 1, *z_right.shape[-2:])

    was_training = sirn.training
    sirn.eval()
    with torch.no_grad():
        out = sirn(lq_l, lq_r, z_left, z_right)
    sirn.train(was_training)

    left, right = out.left.clamp(0.0, 1.0), out.right.clamp(0.0, 1.0)
    if single:
        left, right = left.squeeze(0), right.squeeze(0)
    return StereoImagePair(left, right, lq_pair.id)
