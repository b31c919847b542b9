"""
Training objectives.

L1 terms are mean-reduced per view and summed over the two views. The parallax loss is a
parallax-attention (PAM) formulation over row-wise attention between the views, applied to
residual images; its four sub-terms are individually weighted.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, NamedTuple, Union

import torch

from lib.datapipe import StereoImagePair
from lib.errors import DimensionError, ParameterError

Scalar = Union[torch.Tensor, float]

PARALLAX_TERMS = ("smoothness", "photometric", "cycle", "consistency")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.25
    w_smoothness: float = 1.0
    w_photometric: float = 1.0
    w_cycle: float = 1.0
    w_consistency: float = 1.0
    valid_threshold: float = 0.05

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ParameterError(f"Loss weight '{name}' must be non-negative, got {value}")

    def parallax_weight(self, term: str) -> float:
        return getattr(self, f"w_{term}")


def _l1_views(pred_l, pred_r, gt_l, gt_r) -> torch.Tensor:
    for pred, gt in ((pred_l, gt_l), (pred_r, gt_r)):
        if pred.shape != gt.shape:
            raise DimensionError(f"Prediction {tuple(pred.shape)} does not match target {tuple(gt.shape)}")
    return (pred_l - gt_l).abs().mean() + (pred_r - gt_r).abs().mean()


def reconstruction_loss(pred: StereoImagePair, gt: StereoImagePair) -> torch.Tensor:
    return _l1_views(pred.left, pred.right, gt.left, gt.right)


def diffusion_loss(z_hat_left, z_hat_right, z_left, z_right) -> torch.Tensor:
    """Accepts tensors or LatentHF values."""
    unwrap = lambda z: getattr(z, "z", z)  # noqa: E731
    return _l1_views(unwrap(z_hat_left), unwrap(z_hat_right), unwrap(z_left), unwrap(z_right))


# =============================================================================
# Parallax attention
# =============================================================================

class PamMaps(NamedTuple):
    """Row-wise attention B x H x W x W and valid masks B x 1 x H x W."""

    m_r2l: torch.Tensor
    m_l2r: torch.Tensor
    valid_left: torch.Tensor
    valid_right: torch.Tensor


def warp(img: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """out[b, c, h, i] = sum_j m[b, h, i, j] * img[b, c, h, j]."""
    return torch.einsum("bhij,bchj->bchi", m, img)


def _valid_mask(m_ab: torch.Tensor, m_ba: torch.Tensor, threshold: float) -> torch.Tensor:
    # A pixel is valid when a round trip through the other view lands back on itself.
    cycle = torch.diagonal(m_ab @ m_ba, dim1=-2, dim2=-1)
    return ((1.0 - cycle) < threshold).to(m_ab.dtype).unsqueeze(1).detach()


def compute_pam(feat_left: torch.Tensor, feat_right: torch.Tensor, threshold: float = 0.05) -> PamMaps:
    if feat_left.shape != feat_right.shape:
        raise DimensionError(f"PAM features differ: {tuple(feat_left.shape)} vs {tuple(feat_right.shape)}")
    score = torch.einsum("bchi,bchj->bhij", feat_left, feat_right)
    m_r2l = torch.softmax(score, dim=-1)
    m_l2r = torch.softmax(score.transpose(-2, -1), dim=-1)
    return PamMaps(m_r2l, m_l2r, _valid_mask(m_r2l, m_l2r, threshold), _valid_mask(m_l2r, m_r2l, threshold))


def _masked_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return ((a - b).abs() * mask).mean()


def _smoothness(m: torch.Tensor) -> torch.Tensor:
    vertical = (m[:, :-1] - m[:, 1:]).abs().mean() if m.shape[1] > 1 else m.new_zeros(())
    diagonal = (m[:, :, :-1, :-1] - m[:, :, 1:, 1:]).abs().mean() if m.shape[-1] > 1 else m.new_zeros(())
    return vertical + diagonal


def parallax_terms(pair: StereoImagePair, maps: PamMaps) -> Dict[str, torch.Tensor]:
    """The four unweighted sub-terms on a (typically residual) image pair."""
    left, right = pair.left, pair.right
    if left.dim() == 3:
        left, right = left.unsqueeze(0), right.unsqueeze(0)
    if left.shape[-2:] != maps.m_r2l.shape[1:3]:
        raise DimensionError(f"Images {tuple(left.shape[-2:])} do not match PAM rows {tuple(maps.m_r2l.shape[1:3])}")

    photometric = (_masked_l1(left, warp(right, maps.m_r2l), maps.valid_left)
                   + _masked_l1(right, warp(left, maps.m_l2r), maps.valid_right))
    cycle = (_masked_l1(left, warp(warp(left, maps.m_l2r), maps.m_r2l), maps.valid_left)
             + _masked_l1(right, warp(warp(right, maps.m_r2l), maps.m_l2r), maps.valid_right))
    return {
        "smoothness": _smoothness(maps.m_r2l) + _smoothness(maps.m_l2r),
        "photometric": photometric,
        "cycle": cycle,
        "consistency": (maps.m_r2l - maps.m_l2r.transpose(-2, -1)).abs().mean(),
    }


def parallax_loss(pair: StereoImagePair, maps: PamMaps, w: LossWeights) -> torch.Tensor:
    terms = parallax_terms(pair, maps)
    total = pair.left.new_zeros(())
    for name in PARALLAX_TERMS:
        weight = w.parallax_weight(name)
        if weight:
            total = total + weight * terms[name]
    return total


# =============================================================================
# Stage objectives
# =============================================================================

def stage_objective(stage: int, parts: Mapping[str, Scalar], w: LossWeights) -> torch.Tensor:
    """Stage 1: rec + l1*para. Stage 2: rec + l1*para + l2*diff.

    Terms whose weight is zero are left out of the graph entirely.
    """
    if stage not in (1, 2):
        raise ParameterError(f"stage must be 1 or 2, got {stage}")
    required = ("rec", "para") + (("diff",) if stage == 2 else ())
    missing = [k for k in required if parts.get(k) is None]
    if missing:
        raise ParameterError(f"Stage {stage} objective is missing {missing}")

    total = torch.as_tensor(parts["rec"], dtype=torch.float64 if not torch.is_tensor(parts["rec"]) else None)
    if w.lambda1:
        total = total + w.lambda1 * parts["para"]
    if stage == 2 and w.lambda2:
        total = total + w.lambda2 * parts["diff"]
    return total
