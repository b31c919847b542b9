"""
Invariant suite behind `diffstereo.py selftest`.

Fast checks of the diffusion algebra, attention invariants, degradation helpers, metrics
and the checkpoint archive. Each check records errors on a shared ValidationResult
instead of raising, so one run reports every failure.
"""

import tempfile
from pathlib import Path
from typing import Callable, Dict, List

import torch

from lib.checkpoint import Checkpoint, load_checkpoint, model_params, save_checkpoint
from lib.datapipe import PatchSpec, bicubic_resize, gaussian_kernel, patch_offsets
from lib.metrics import psnr, ssim
from models.common import pixel_shuffle, pixel_unshuffle
from models.diffusion import forward_step, make_schedule, reverse_step
from models.sirn import CIB, CibParams, channel_attention

EXPECTED_ALPHA_BAR = (0.9, 0.54300, 0.16652, 0.0016652)


class ValidationResult:
    """Collects check errors and the names of checks that ran."""

    def __init__(self):
        self.errors: List[str] = []
        self.passed: List[str] = []

    def error(self, message: str) -> None:
        self.errors.append(message)

    def is_valid(self) -> bool:
        return len(self.errors) == 0


# =============================================================================
# Checks
# =============================================================================

def check_schedule(result: ValidationResult) -> None:
    sched = make_schedule(4, 0.1, 0.99)
    for t, expected in enumerate(EXPECTED_ALPHA_BAR, start=1):
        got = float(sched.alpha_bar[t - 1])
        if abs(got - expected) > 1e-5:
            result.error(f"[schedule] alpha_bar_{t} = {got:.7f}, expected {expected}")
    if float(sched.alpha_bar[-1]) >= 0.01:
        result.error("[schedule] alpha_bar_T is not below 0.01")


def check_reverse_inverts_forward(result: ValidationResult) -> None:
    sched = make_schedule(4, 0.1, 0.99)
    gen = torch.Generator().manual_seed(0)
    for t in range(1, sched.T + 1):
        z_prev = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        eps = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        err = (reverse_step(forward_step(z_prev, t, sched, eps), eps, t, sched) - z_prev).abs().max().item()
        if err > 1e-6:
            result.error(f"[diffusion] reverse_step does not invert forward_step at t={t} (err {err:.2e})")


def check_pixel_shuffle(result: ValidationResult) -> None:
    x = torch.arange(2 * 8 * 12, dtype=torch.float32).reshape(1, 2, 8, 12)
    for r in (1, 2, 4):
        if not torch.equal(pixel_shuffle(pixel_unshuffle(x, r), r), x):
            result.error(f"[lren] pixel_shuffle does not invert pixel_unshuffle for r={r}")


def check_attention(result: ValidationResult, trials: int = 10) -> None:
    torch.manual_seed(0)
    cib = CIB(CibParams(channels=8, heads=2), guided=False).double()
    for _ in range(trials):
        x_l = torch.randn(1, 8, 4, 12, dtype=torch.float64)
        x_r = torch.randn(1, 8, 4, 12, dtype=torch.float64)
        with torch.no_grad():
            y_l, y_r, attn = channel_attention(x_l, x_r, cib)
            s_l, s_r, attn_swapped = channel_attention(x_r, x_l, cib)
        if (attn.sum(-1) - 1).abs().max().item() > 1e-6:
            result.error("[sirn] attention rows do not sum to 1")
            return
        if (attn - attn_swapped).abs().max().item() > 1e-6 or (y_l - s_r).abs().max().item() > 1e-6:
            result.error("[sirn] view swap does not swap the attention outputs")
            return


def check_degradation(result: ValidationResult) -> None:
    if abs(gaussian_kernel(15, 1.0).sum().item() - 1.0) > 1e-12:
        result.error("[datapipe] blur kernel does not sum to 1")
    const = torch.full((3, 40, 40), 0.37, dtype=torch.float64)
    if (bicubic_resize(const, 10, 10) - 0.37).abs().max().item() > 1e-12:
        result.error("[datapipe] bicubic resize of a constant is not constant")
    spec = PatchSpec()
    count = len(patch_offsets(50, spec.patch_h, spec.stride)) * len(patch_offsets(130, spec.patch_w, spec.stride))
    if count != 6:
        result.error(f"[datapipe] 50x130 LQ image gives {count} patches, expected 6")


def check_metrics(result: ValidationResult) -> None:
    a = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
    if abs(psnr(a, a + 0.1) - 20.0) > 1e-9:
        result.error("[metrics] uniform 0.1 difference does not give 20 dB")
    if abs(ssim(a, a) - 1.0) > 1e-12:
        result.error("[metrics] SSIM of identical images is not 1")


def check_checkpoint(result: ValidationResult) -> None:
    torch.manual_seed(0)
    cib = CIB(CibParams(channels=8, heads=2))
    x = torch.randn(1, 8, 4, 12)
    with torch.no_grad():
        before = cib(x, x.flip(-1))[0]
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Path(tmp) / "probe.dsck",
                               Checkpoint(model_params({"cib": cib}), {"probe": True}, stage=1, epoch=0))
        loaded = load_checkpoint(path)
    fresh = CIB(CibParams(channels=8, heads=2))
    fresh.load_state_dict(loaded.module_state("cib"))
    with torch.no_grad():
        after = fresh(x, x.flip(-1))[0]
    if not torch.equal(before, after):
        result.error("[checkpoint] reloaded weights do not reproduce the forward pass")


CHECKS: Dict[str, Callable[[ValidationResult], None]] = {
    "schedule": check_schedule,
    "diffusion": check_reverse_inverts_forward,
    "pixel_shuffle": check_pixel_shuffle,
    "attention": check_attention,
    "degradation": check_degradation,
    "metrics": check_metrics,
    "checkpoint": check_checkpoint,
}


def run_selftest() -> ValidationResult:
    """Run every check and return the result."""
    result = ValidationResult()
    for name, check in CHECKS.items():
        before = len(result.errors)
        try:
            check(result)
        except Exception as e:  # a crashing check is a failed check
            result.error(f"[{name}] raised {type(e).__name__}: {e}")
        if len(result.errors) == before:
            result.passed.append(name)
    return result
