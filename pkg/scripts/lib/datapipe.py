"""
Stereo data pipeline: paired image loading, LQ synthesis, patch cutting and flips.

All transforms are pure functions of their inputs and an explicit torch.Generator.
Per-sample generators are derived from (global seed, sample id), so worker count and
iteration order never change the produced bits.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from lib.errors import DataError, DimensionError, ParameterError
from lib.io import load_jsonl, read_png, save_jsonl, write_png

logger = logging.getLogger(__name__)


# =============================================================================
# Domain Types
# =============================================================================

class Task(str, Enum):
    SR4 = "sr4"
    BLUR = "blur"
    LOWLIGHT = "lowlight"

    @property
    def scale(self) -> int:
        """HQ / LQ resolution ratio for the task."""
        return 4 if self is Task.SR4 else 1


@dataclass
class StereoImagePair:
    """Left/right views, each 3 x H x W (or batched B x 3 x H x W)."""

    left: torch.Tensor
    right: torch.Tensor
    id: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DimensionError(
                f"Stereo views differ in shape: {tuple(self.left.shape)} vs {tuple(self.right.shape)}"
            )
        if self.left.dim() not in (3, 4) or self.left.shape[-3] != 3:
            raise DimensionError(f"Expected 3 x H x W views, got {tuple(self.left.shape)}")
        if self.left.shape[-2] < 1 or self.left.shape[-1] < 1:
            raise DimensionError(f"Empty image: {tuple(self.left.shape)}")

    @property
    def height(self) -> int:
        return self.left.shape[-2]

    @property
    def width(self) -> int:
        return self.left.shape[-1]

    def validate_range(self) -> "StereoImagePair":
        """Check the [0, 1] value invariant; returns self for chaining."""
        for name, view in (("left", self.left), ("right", self.right)):
            lo, hi = view.min().item(), view.max().item()
            if lo < 0.0 or hi > 1.0:
                raise ParameterError(f"{self.id or 'pair'}: {name} view outside [0, 1] (min {lo}, max {hi})")
        return self

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "StereoImagePair":
        """Apply the same per-view transform to both views."""
        return StereoImagePair(fn(self.left), fn(self.right), self.id)

    def swap(self) -> "StereoImagePair":
        return StereoImagePair(self.right, self.left, self.id)

    @staticmethod
    def stack(pairs: Sequence["StereoImagePair"]) -> "StereoImagePair":
        """Batch single pairs into one B x 3 x H x W pair."""
        return StereoImagePair(
            torch.stack([p.left for p in pairs]),
            torch.stack([p.right for p in pairs]),
            ",".join(p.id for p in pairs),
        )


@dataclass(frozen=True)
class DegradationSpec:
    task: Task = Task.SR4
    blur_ksize: int = 15
    blur_sigma: float = 1.0
    lowlight_gamma_range: Tuple[float, float] = (2.0, 3.0)
    lowlight_scale_range: Tuple[float, float] = (0.1, 0.3)
    noise_gauss_sigma: float = 0.01
    noise_poisson_peak: float = 200.0
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "task", Task(self.task))
        except ValueError:
            raise ParameterError(f"Unknown task '{self.task}'. Must be one of {[t.value for t in Task]}")
        object.__setattr__(self, "lowlight_gamma_range", tuple(self.lowlight_gamma_range))
        object.__setattr__(self, "lowlight_scale_range", tuple(self.lowlight_scale_range))

        if self.blur_ksize < 3 or self.blur_ksize % 2 == 0:
            raise ParameterError(f"blur_ksize must be odd and >= 3, got {self.blur_ksize}")
        if self.blur_sigma <= 0:
            raise ParameterError(f"blur_sigma must be > 0, got {self.blur_sigma}")
        for name in ("lowlight_gamma_range", "lowlight_scale_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ParameterError(f"{name} must be a positive interval, got ({lo}, {hi})")
        if self.noise_gauss_sigma < 0:
            raise ParameterError(f"noise_gauss_sigma must be >= 0, got {self.noise_gauss_sigma}")
        if self.noise_poisson_peak <= 0:
            raise ParameterError(f"noise_poisson_peak must be > 0 (or inf), got {self.noise_poisson_peak}")

    @property
    def scale(self) -> int:
        return self.task.scale


@dataclass(frozen=True)
class PatchSpec:
    patch_h: int = 30
    patch_w: int = 90
    stride: int = 20

    def __post_init__(self):
        if self.patch_h < 1 or self.patch_w < 1:
            raise ParameterError(f"Patch dims must be positive, got {self.patch_h}x{self.patch_w}")
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")


@dataclass
class TrainingSample:
    """An aligned LQ/HQ stereo sample."""

    lq: StereoImagePair
    hq: StereoImagePair

    @property
    def id(self) -> str:
        return self.lq.id


def sample_generator(global_seed: int, *keys) -> torch.Generator:
    """Derive an independent generator from the global seed and a sample key."""
    material = ":".join([str(global_seed)] + [str(k) for k in keys]).encode("utf-8")
    seed = int.from_bytes(hashlib.sha256(material).digest()[:8], "little") & ((1 << 63) - 1)
    return torch.Generator().manual_seed(seed)


# =============================================================================
# Bicubic resampling (a = -0.5, MATLAB imresize convention)
# =============================================================================

def _cubic(x: torch.Tensor) -> torch.Tensor:
    abs_x = torch.abs(x)
    abs_x2 = abs_x ** 2
    abs_x3 = abs_x ** 3
    near = (1.5 * abs_x3 - 2.5 * abs_x2 + 1) * (abs_x <= 1).to(x.dtype)
    far = (-0.5 * abs_x3 + 2.5 * abs_x2 - 4 * abs_x + 2) * ((abs_x > 1) & (abs_x <= 2)).to(x.dtype)
    return near + far


@lru_cache(maxsize=64)
def resize_matrix(in_length: int, out_length: int, antialias: bool = True) -> torch.Tensor:
    """Dense out_length x in_length float64 resampling matrix; rows sum to 1.

    Borders use symmetric (edge-repeating) reflection.
    """
    scale = out_length / in_length
    kernel_width = 4.0
    if scale < 1 and antialias:
        kernel_width = kernel_width / scale

    x = torch.arange(1, out_length + 1, dtype=torch.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = torch.floor(u - kernel_width / 2)
    taps = math.ceil(kernel_width) + 2
    indices = left.unsqueeze(1) + torch.arange(taps, dtype=torch.float64).unsqueeze(0)
    distance = u.unsqueeze(1) - indices
    if scale < 1 and antialias:
        weights = scale * _cubic(distance * scale)
    else:
        weights = _cubic(distance)
    weights = weights / weights.sum(dim=1, keepdim=True)

    # 1-based indices folded into [0, in_length) with edge-repeating reflection
    period = 2 * in_length
    folded = torch.remainder(indices.long() - 1, period)
    folded = torch.where(folded < in_length, folded, period - 1 - folded)

    matrix = torch.zeros(out_length, in_length, dtype=torch.float64)
    matrix.scatter_add_(1, folded, weights)
    return matrix


def bicubic_resize(img: torch.Tensor, out_h: int, out_w: int, antialias: bool = True) -> torch.Tensor:
    """Separable bicubic resampling of (..., H, W) to (..., out_h, out_w). Linear, unclamped."""
    in_h, in_w = img.shape[-2:]
    rows = resize_matrix(in_h, out_h, antialias).to(device=img.device, dtype=img.dtype)
    cols = resize_matrix(in_w, out_w, antialias).to(device=img.device, dtype=img.dtype)
    return torch.matmul(torch.matmul(rows, img), cols.transpose(0, 1))


def bicubic_downsample(img: torch.Tensor, scale: int, clamp: bool = True) -> torch.Tensor:
    """Shrink (..., H, W) by an integer scale in {2, 4}; dims must divide exactly."""
    if scale not in (2, 4):
        raise ParameterError(f"scale must be 2 or 4, got {scale}")
    h, w = img.shape[-2:]
    if h % scale or w % scale:
        raise DimensionError(f"Image {h}x{w} is not divisible by scale {scale}")
    out = bicubic_resize(img, h // scale, w // scale)
    return out.clamp(0.0, 1.0) if clamp else out


def bicubic_upsample(img: torch.Tensor, scale: int) -> torch.Tensor:
    """Enlarge (..., H, W) by an integer scale (no clamping; differentiable)."""
    if scale == 1:
        return img
    h, w = img.shape[-2:]
    return bicubic_resize(img, h * scale, w * scale)


def modcrop(img: torch.Tensor, scale: int) -> torch.Tensor:
    """Crop bottom/right edges so H and W are multiples of scale."""
    h, w = img.shape[-2:]
    return img[..., : h - h % scale, : w - w % scale]


# =============================================================================
# Blur and low-light synthesis
# =============================================================================

def gaussian_kernel(ksize: int, sigma: float, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Normalized ksize x ksize Gaussian kernel (outer product of the 1-D kernel)."""
    if ksize < 1 or ksize % 2 == 0:
        raise ParameterError(f"ksize must be odd, got {ksize}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    return torch.outer(_gaussian_1d(ksize, sigma, dtype), _gaussian_1d(ksize, sigma, dtype))


def _gaussian_1d(ksize: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    ax = torch.arange(ksize, dtype=dtype) - (ksize - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_blur(img: torch.Tensor, ksize: int, sigma: float, clamp: bool = True) -> torch.Tensor:
    """Separable Gaussian blur of (..., H, W) with reflective borders."""
    if ksize < 1 or ksize % 2 == 0:
        raise ParameterError(f"ksize must be odd, got {ksize}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    h, w = img.shape[-2:]
    pad = ksize // 2
    if pad >= h or pad >= w:
        raise DimensionError(f"Image {h}x{w} too small for reflective padding of kernel {ksize}")

    g = _gaussian_1d(ksize, sigma, img.dtype).to(img.device)
    x = img.reshape(-1, 1, h, w)
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, g.view(1, 1, 1, ksize))
    x = F.conv2d(x, g.view(1, 1, ksize, 1))
    out = x.reshape(img.shape)
    return out.clamp(0.0, 1.0) if clamp else out


def draw_lowlight_params(spec: DegradationSpec, rng: torch.Generator) -> Tuple[float, float]:
    """Draw (gamma, scale) uniformly from the spec ranges."""
    u = torch.rand(2, generator=rng, dtype=torch.float64)
    g_lo, g_hi = spec.lowlight_gamma_range
    s_lo, s_hi = spec.lowlight_scale_range
    return g_lo + (g_hi - g_lo) * u[0].item(), s_lo + (s_hi - s_lo) * u[1].item()


def apply_lowlight(img: torch.Tensor, gamma: float, scale: float, spec: DegradationSpec,
                   rng: torch.Generator) -> torch.Tensor:
    """Darken by scale * img^gamma, then add Poisson and Gaussian noise, then clamp."""
    x = scale * img.clamp(0.0, 1.0) ** gamma
    peak = spec.noise_poisson_peak
    if math.isfinite(peak):
        x = torch.poisson(x * peak, generator=rng) / peak
    if spec.noise_gauss_sigma > 0:
        x = x + spec.noise_gauss_sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    return x.clamp(0.0, 1.0)


def synthesize_lowlight(img: torch.Tensor, spec: DegradationSpec, rng: torch.Generator) -> torch.Tensor:
    gamma, scale = draw_lowlight_params(spec, rng)
    return apply_lowlight(img, gamma, scale, spec, rng)


def synthesize_lowlight_pair(pair: StereoImagePair, spec: DegradationSpec,
                             rng: torch.Generator) -> StereoImagePair:
    """Low-light synthesis with one (gamma, scale, noise) realization shared by both views."""
    gamma, scale = draw_lowlight_params(spec, rng)
    state = rng.get_state()
    left = apply_lowlight(pair.left, gamma, scale, spec, rng)
    rng.set_state(state)
    right = apply_lowlight(pair.right, gamma, scale, spec, rng)
    return StereoImagePair(left, right, pair.id)


def degrade_pair(hq: StereoImagePair, spec: DegradationSpec, rng: torch.Generator) -> StereoImagePair:
    """Synthesize the task's LQ pair from an HQ pair."""
    if spec.task is Task.SR4:
        return hq.map(lambda v: bicubic_downsample(v, spec.scale))
    if spec.task is Task.BLUR:
        return hq.map(lambda v: gaussian_blur(v, spec.blur_ksize, spec.blur_sigma))
    return synthesize_lowlight_pair(hq, spec, rng)


# =============================================================================
# Patches and augmentation
# =============================================================================

def patch_offsets(length: int, size: int, stride: int) -> List[int]:
    if size > length:
        raise ParameterError(f"Patch size {size} exceeds image size {length}")
    return list(range(0, length - size + 1, stride))


def extract_patches(lq: StereoImagePair, hq: StereoImagePair, spec: PatchSpec,
                    scale: int) -> List[TrainingSample]:
    """Cut aligned LQ/HQ patch pairs on a regular grid at LQ resolution."""
    if hq.height != scale * lq.height or hq.width != scale * lq.width:
        raise DimensionError(
            f"HQ {hq.height}x{hq.width} is not {scale}x LQ {lq.height}x{lq.width}"
        )
    samples = []
    for y in patch_offsets(lq.height, spec.patch_h, spec.stride):
        for x in patch_offsets(lq.width, spec.patch_w, spec.stride):
            patch_id = f"{lq.id}@{y},{x}"
            lq_crop = lq.map(lambda v: v[..., y:y + spec.patch_h, x:x + spec.patch_w].clone())
            hq_crop = hq.map(lambda v: v[..., y * scale:(y + spec.patch_h) * scale,
                                         x * scale:(x + spec.patch_w) * scale].clone())
            lq_crop.id = hq_crop.id = patch_id
            samples.append(TrainingSample(lq_crop, hq_crop))
    return samples


def _hflip(pair: StereoImagePair) -> StereoImagePair:
    # mirrored left view becomes the right view, keeping epipolar order
    return StereoImagePair(pair.right.flip(-1), pair.left.flip(-1), pair.id)


def _vflip(pair: StereoImagePair) -> StereoImagePair:
    return pair.map(lambda v: v.flip(-2))


def augment_flip(sample: TrainingSample, rng: torch.Generator, hflip: Optional[bool] = None,
                 vflip: Optional[bool] = None) -> TrainingSample:
    """Random horizontal/vertical flips applied identically to LQ and HQ.

    Explicit `hflip` / `vflip` override the draw; the generator always advances by two.
    """
    draws = torch.rand(2, generator=rng)
    do_h = bool(draws[0] < 0.5) if hflip is None else hflip
    do_v = bool(draws[1] < 0.5) if vflip is None else vflip
    lq, hq = sample.lq, sample.hq
    if do_h:
        lq, hq = _hflip(lq), _hflip(hq)
    if do_v:
        lq, hq = _vflip(lq), _vflip(hq)
    return TrainingSample(lq, hq)


# =============================================================================
# Dataset
# =============================================================================

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    hq_left: Path
    hq_right: Path


def load_manifest(file_path: Path) -> List[ManifestEntry]:
    """Load a JSON-lines manifest of {"id", "hq_left", "hq_right"}; paths resolve against its dir."""
    file_path = Path(file_path)
    base = file_path.parent
    entries, seen = [], set()
    for record in load_jsonl(file_path):
        missing = [k for k in ("id", "hq_left", "hq_right") if k not in record]
        if missing:
            raise DataError(f"{file_path}: record missing {missing}: {record}")
        if record["id"] in seen:
            raise DataError(f"{file_path}: duplicate id '{record['id']}'")
        seen.add(record["id"])
        entries.append(ManifestEntry(
            id=str(record["id"]),
            hq_left=(base / record["hq_left"]).resolve(),
            hq_right=(base / record["hq_right"]).resolve(),
        ))
    return entries


def scan_dataset_root(root: Path) -> List[ManifestEntry]:
    """Discover `<root>/hq/<id>_L.png` / `<id>_R.png` pairs."""
    hq_dir = Path(root) / "hq"
    if not hq_dir.is_dir():
        raise DataError(f"No hq/ directory under {root}")
    entries = []
    for left in sorted(hq_dir.glob("*_L.png")):
        sample_id = left.name[: -len("_L.png")]
        right = hq_dir / f"{sample_id}_R.png"
        if not right.exists():
            raise DataError(f"Missing right view for '{sample_id}': {right}")
        entries.append(ManifestEntry(sample_id, left, right))
    return entries


def load_hq_pair(entry: ManifestEntry, scale: int = 1) -> StereoImagePair:
    """Read an HQ pair, cropped to a multiple of `scale`."""
    left, right = read_png(entry.hq_left), read_png(entry.hq_right)
    if left.shape != right.shape:
        raise DataError(f"'{entry.id}': left {tuple(left.shape)} and right {tuple(right.shape)} differ")
    if scale > 1 and (left.shape[-2] % scale or left.shape[-1] % scale):
        logger.debug("Cropping '%s' from %s to a multiple of %d", entry.id, tuple(left.shape[-2:]), scale)
        left, right = modcrop(left, scale), modcrop(right, scale)
    return StereoImagePair(left, right, entry.id).validate_range()


def lq_cache_dir(root: Path, task: Task) -> Path:
    return Path(root) / f"lq_{Task(task).value}"


def prepare_dataset(entries: Sequence[ManifestEntry], spec: DegradationSpec, patch_spec: PatchSpec,
                    out_dir: Path) -> Dict:
    """Materialize LQ views into `<out>/lq_<task>/` and write the patch index."""
    out_dir = Path(out_dir)
    cache = lq_cache_dir(out_dir, spec.task)
    index = []
    for entry in entries:
        hq = load_hq_pair(entry, spec.scale)
        lq = degrade_pair(hq, spec, sample_generator(spec.seed, entry.id))
        write_png(cache / f"{entry.id}_L.png", lq.left)
        write_png(cache / f"{entry.id}_R.png", lq.right)
        for y in patch_offsets(lq.height, patch_spec.patch_h, patch_spec.stride):
            for x in patch_offsets(lq.width, patch_spec.patch_w, patch_spec.stride):
                index.append({
                    "id": f"{entry.id}@{y},{x}", "sample_id": entry.id, "y": y, "x": x,
                    "patch_h": patch_spec.patch_h, "patch_w": patch_spec.patch_w, "scale": spec.scale,
                })
    index_path = out_dir / f"patches_{spec.task.value}.jsonl"
    save_jsonl(index_path, index)
    logger.info("Prepared %d pairs, %d patches for task %s", len(entries), len(index), spec.task.value)
    return {"pairs": len(entries), "patches": len(index), "lq_dir": str(cache), "index": str(index_path)}


class StereoPatchDataset(Dataset):
    """In-memory patch dataset yielding dicts of lq_left, lq_right, hq_left, hq_right.

    Flips are drawn from a generator keyed by (seed, patch id, epoch), so the sample
    stream is independent of DataLoader workers.
    """

    def __init__(self, samples: Sequence[TrainingSample], augment: bool = True, seed: int = 0):
        if not samples:
            raise DataError("Dataset is empty")
        self.samples = list(samples)
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    @classmethod
    def from_entries(cls, entries: Sequence[ManifestEntry], spec: DegradationSpec, patch_spec: PatchSpec,
                     augment: bool = True, lq_dir: Optional[Path] = None) -> "StereoPatchDataset":
        samples = []
        for entry in entries:
            hq = load_hq_pair(entry, spec.scale)
            if lq_dir is not None and (Path(lq_dir) / f"{entry.id}_L.png").exists():
                lq = StereoImagePair(read_png(Path(lq_dir) / f"{entry.id}_L.png"),
                                     read_png(Path(lq_dir) / f"{entry.id}_R.png"), entry.id)
            else:
                lq = degrade_pair(hq, spec, sample_generator(spec.seed, entry.id))
            samples.extend(extract_patches(lq, hq, patch_spec, spec.scale))
        logger.info("Loaded %d pairs into %d patches", len(entries), len(samples))
        return cls(samples, augment=augment, seed=spec.seed)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        sample = self.samples[index]
        if self.augment:
            sample = augment_flip(sample, sample_generator(self.seed, sample.id, self.epoch))
        return {
            "lq_left": sample.lq.left, "lq_right": sample.lq.right,
            "hq_left": sample.hq.left, "hq_right": sample.hq.right,
        }
