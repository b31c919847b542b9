"""
Compact latent diffusion over LHFR maps.

Linear beta schedule, forward noising of the GT latent, a condition extraction network
(CEN) on the LQ view, a small residual denoiser and the deterministic reverse chain.
The stochastic sigma_t term is computed but never sampled.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from lib.datapipe import StereoImagePair
from lib.errors import ConfigError, DimensionError, ParameterError
from models.lren import LatentHF, View

logger = logging.getLogger(__name__)

NoisePredictor = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


# =============================================================================
# Schedule
# =============================================================================

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step sequences indexed by t - 1 (t is 1-based)."""

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ParameterError(f"t must be in [1, {self.T}], got {t}")
        return t - 1

    def at(self, t: int) -> Tuple[float, float]:
        """(alpha_t, alpha_bar_t) as Python floats."""
        i = self._check_t(t)
        return float(self.alpha[i]), float(self.alpha_bar[i])


def make_schedule(T: int = 4, beta_start: float = 0.1, beta_end: float = 0.99) -> NoiseSchedule:
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if T == 1:
        if not 0.0 < beta_start < 1.0:
            raise ParameterError(f"beta must be in (0, 1), got {beta_start}")
    elif not 0.0 < beta_start < beta_end < 1.0:
        raise ParameterError(f"Need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")

    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    sigma = torch.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta)

    if alpha_bar[-1] >= 0.01:
        logger.warning("alpha_bar_T = %.4f >= 0.01; pure-noise start will not match training",
                       float(alpha_bar[-1]))
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma)


# =============================================================================
# Chain algebra
# =============================================================================

def forward_diffuse(z0: torch.Tensor, t: int, sched: NoiseSchedule, eps: torch.Tensor) -> torch.Tensor:
    """Z_t = sqrt(abar_t) Z_0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise DimensionError(f"Noise {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")
    _, abar = sched.at(t)
    return abar ** 0.5 * z0 + (1.0 - abar) ** 0.5 * eps


def reverse_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic Z_{t-1} = (Z_t - (1 - a_t) / sqrt(1 - abar_t) eps) / sqrt(a_t)."""
    a, abar = sched.at(t)
    coef = 0.0 if a == 1.0 else (1.0 - a) / (1.0 - abar) ** 0.5
    return (z_t - coef * eps_hat) / a ** 0.5


def forward_step(z_prev: torch.Tensor, t: int, sched: NoiseSchedule, eps: torch.Tensor) -> torch.Tensor:
    """Exact inverse of reverse_step for a given eps: Z_t from Z_{t-1}."""
    a, abar = sched.at(t)
    coef = 0.0 if a == 1.0 else (1.0 - a) / (1.0 - abar) ** 0.5
    return a ** 0.5 * z_prev + coef * eps


def record_trajectory(z0: torch.Tensor, sched: NoiseSchedule,
                      generator: Optional[torch.Generator] = None) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
    """Run forward_step from Z_0 to Z_T; returns ([Z_0..Z_T], [eps_1..eps_T])."""
    zs, epss = [z0], []
    for t in range(1, sched.T + 1):
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        epss.append(eps)
        zs.append(forward_step(zs[-1], t, sched, eps))
    return zs, epss


# =============================================================================
# Networks
# =============================================================================

@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 4
    beta_start: float = 0.1
    beta_end: float = 0.99
    cen_width: int = 32
    cen_layers: int = 3
    denoiser_width: int = 64
    denoiser_layers: int = 5
    guidance: str = "lhfr"
    vector_length: int = 256

    def __post_init__(self):
        if self.cen_layers < 1 or self.denoiser_layers < 2:
            raise ConfigError("CEN needs >= 1 layer and the denoiser >= 2")
        if self.cen_width < 1 or self.denoiser_width < 1:
            raise ConfigError("Diffusion network widths must be positive")
        if self.guidance not in ("lhfr", "vector"):
            raise ConfigError(f"guidance must be 'lhfr' or 'vector', got '{self.guidance}'")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


class CEN(nn.Module):
    """Condition extraction: LQ view B x 3 x H x W -> B x 1 x H x W, stride 1."""

    def __init__(self, width: int = 32, layers: int = 3, vector_length: Optional[int] = None):
        super().__init__()
        convs = []
        prev = 3
        for _ in range(layers - 1):
            convs += [nn.Conv2d(prev, width, 3, 1, 1), nn.LeakyReLU(0.2)]
            prev = width
        convs.append(nn.Conv2d(prev, 1, 3, 1, 1))
        self.body = nn.Sequential(*convs)
        self.vector_length = vector_length

    def forward(self, lq: torch.Tensor) -> torch.Tensor:
        d = self.body(lq)
        if self.vector_length is not None:
            d = F.adaptive_avg_pool2d(d, (1, self.vector_length))
        return d


class Denoiser(nn.Module):
    """Residual CNN over [Z_t, D, t/T] predicting eps."""

    def __init__(self, width: int = 64, layers: int = 5):
        super().__init__()
        self.conv_in = nn.Conv2d(3, width, 3, 1, 1)
        self.body = nn.ModuleList([nn.Conv2d(width, width, 3, 1, 1) for _ in range(layers - 2)])
        self.conv_out = nn.Conv2d(width, 1, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, z_t: torch.Tensor, d: torch.Tensor, t_frac: float) -> torch.Tensor:
        t_map = torch.full_like(z_t, t_frac)
        x = self.act(self.conv_in(torch.cat([z_t, d, t_map], dim=1)))
        for conv in self.body:
            x = x + self.act(conv(x))
        return self.conv_out(x)


class DiffusionTrajectory(NamedTuple):
    left: torch.Tensor
    right: torch.Tensor
    steps_left: List[torch.Tensor]
    steps_right: List[torch.Tensor]


class LatentDiffusion(nn.Module):
    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        vector = cfg.vector_length if cfg.guidance == "vector" else None
        self.cen = CEN(cfg.cen_width, cfg.cen_layers, vector)
        self.denoiser = Denoiser(cfg.denoiser_width, cfg.denoiser_layers)
        self.schedule = cfg.schedule()

    def predict_noise(self, z_t: torch.Tensor, d: torch.Tensor, t: int) -> torch.Tensor:
        self.schedule.at(t)
        if z_t.shape != d.shape:
            raise DimensionError(f"Latent {tuple(z_t.shape)} and condition {tuple(d.shape)} differ")
        return self.denoiser(z_t, d, t / self.schedule.T)

    def _chain(self, z_T: torch.Tensor, d: torch.Tensor, predictor: NoisePredictor,
               keep: bool) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        z = z_T
        steps = [z] if keep else []
        for t in range(self.schedule.T, 0, -1):
            z = reverse_step(z, predictor(z, d, t), t, self.schedule)
            if keep:
                steps.append(z)
        return z, steps

    def sample(self, lq_left: torch.Tensor, lq_right: torch.Tensor, z_T_left: Optional[torch.Tensor] = None,
               z_T_right: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None,
               noise_predictor: Optional[NoisePredictor] = None,
               return_trajectory: bool = False) -> DiffusionTrajectory:
        """Estimate Z_0 per view; both views share CEN and denoiser weights.

        Starts from the given Z_T (training) or standard normal noise drawn left then right
        from `generator` (inference). The chain is differentiable end to end.
        """
        d_l, d_r = self.cen(lq_left), self.cen(lq_right)
        if z_T_left is None:
            z_T_left = torch.randn(d_l.shape, generator=generator, dtype=d_l.dtype).to(d_l.device)
        if z_T_right is None:
            z_T_right = torch.randn(d_r.shape, generator=generator, dtype=d_r.dtype).to(d_r.device)
        predictor = noise_predictor or self.predict_noise
        z_l, steps_l = self._chain(z_T_left, d_l, predictor, return_trajectory)
        z_r, steps_r = self._chain(z_T_right, d_r, predictor, return_trajectory)
        return DiffusionTrajectory(z_l, z_r, steps_l, steps_r)

    def noised_start(self, z0_left: torch.Tensor, z0_right: torch.Tensor,
                     generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Training-time Z_T: GT latents forward-diffused to t = T."""
        T = self.schedule.T
        eps_l = torch.randn(z0_left.shape, generator=generator, dtype=z0_left.dtype).to(z0_left.device)
        eps_r = torch.randn(z0_right.shape, generator=generator, dtype=z0_right.dtype).to(z0_right.device)
        return (forward_diffuse(z0_left, T, self.schedule, eps_l),
                forward_diffuse(z0_right, T, self.schedule, eps_r))


def extract_condition(lq_img: torch.Tensor, diffusion: LatentDiffusion) -> torch.Tensor:
    """3 x H x W -> H x W (batched inputs keep their batch dim)."""
    single = lq_img.dim() == 3
    d = diffusion.cen(lq_img.unsqueeze(0) if single else lq_img).squeeze(1)
    return d.squeeze(0) if single else d


def predict_noise(z_t: torch.Tensor, d: torch.Tensor, t: int, diffusion: LatentDiffusion) -> torch.Tensor:
    """H x W latent and condition -> H x W noise estimate."""
    single = z_t.dim() == 2
    z4 = z_t.reshape(1, 1, *z_t.shape) if single else z_t.unsqueeze(1)
    d4 = d.reshape(1, 1, *d.shape) if single else d.unsqueeze(1)
    eps = diffusion.predict_noise(z4, d4, t)
    return eps.reshape(z_t.shape)


def sample_lhfr(lq_pair: StereoImagePair, diffusion: LatentDiffusion,
                generator: Optional[torch.Generator] = None,
                z_T: Optional[Tuple[torch.Tensor, torch.Tensor]] = None) -> Tuple[LatentHF, LatentHF]:
    """Per-view Z_0 estimate for an LQ pair (single or batched)."""
    single = lq_pair.left.dim() == 3
    lq_l = lq_pair.left.unsqueeze(0) if single else lq_pair.left
    lq_r = lq_pair.right.unsqueeze(0) if single else lq_pair.right
    z_T_l = z_T_r = None
    if z_T is not None:
        z_T_l, z_T_r = (z.reshape(lq_l.shape[0], 1, *z.shape[-2:]) for z in z_T)
    out = diffusion.sample(lq_l, lq_r, z_T_l, z_T_r, generator=generator)
    z_l, z_r = out.left.squeeze(1), out.right.squeeze(1)
    if single:
        z_l, z_r = z_l.squeeze(0), z_r.squeeze(0)
    return LatentHF(z_l, View.LEFT), LatentHF(z_r, View.RIGHT)
