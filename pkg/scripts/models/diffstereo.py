"""
DiffStereo container: LREN, latent diffusion and SIRN built from one model profile.

State dict names carry the `lren.`, `diffusion.` and `sirn.` prefixes used in checkpoints.
"""

from typing import List, NamedTuple, Optional

import torch
import torch.nn as nn

from lib.datapipe import StereoImagePair
from lib.errors import ConfigError
from models.diffusion import DiffusionConfig, LatentDiffusion
from models.lren import LREN, LrenParams
from models.sirn import SIRN, SirnConfig, restore


class Restoration(NamedTuple):
    pair: StereoImagePair
    z_left: Optional[torch.Tensor]
    z_right: Optional[torch.Tensor]
    steps_left: List[torch.Tensor]
    steps_right: List[torch.Tensor]


class DiffStereo(nn.Module):
    def __init__(self, lren: LrenParams, sirn: SirnConfig, diffusion: DiffusionConfig):
        super().__init__()
        if not lren.guidance == sirn.guidance == diffusion.guidance:
            raise ConfigError("LREN, SIRN and diffusion must agree on the guidance kind")
        if sirn.guidance == "vector" and not lren.vector_length == diffusion.vector_length == sirn.channels:
            raise ConfigError("Vector guidance length must equal the SIRN width")
        self.lren = LREN(lren)
        self.diffusion = LatentDiffusion(diffusion)
        self.sirn = SIRN(sirn)

    @classmethod
    def from_profile(cls, profile) -> "DiffStereo":
        return cls(profile.lren, profile.sirn, profile.diffusion)

    @torch.no_grad()
    def infer(self, lq: StereoImagePair, generator: Optional[torch.Generator] = None,
              keep_steps: bool = False) -> Restoration:
        """Restore an LQ pair with latents sampled from pure noise. Never touches HQ data."""
        single = lq.left.dim() == 3
        lq_l = lq.left.unsqueeze(0) if single else lq.left
        lq_r = lq.right.unsqueeze(0) if single else lq.right
        was_training = self.training
        self.eval()
        z_l = z_r = None
        steps_l, steps_r = [], []
        if self.sirn.cfg.use_lhfr:
            out = self.diffusion.sample(lq_l, lq_r, generator=generator, return_trajectory=keep_steps)
            z_l, z_r, steps_l, steps_r = out
        restored = restore(StereoImagePair(lq_l, lq_r, lq.id), z_l, z_r, self.sirn)
        self.train(was_training)
        if single:
            restored = StereoImagePair(restored.left[0], restored.right[0], lq.id)
        return Restoration(restored, z_l, z_r, steps_l, steps_r)
