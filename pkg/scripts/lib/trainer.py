"""
Two-stage training and evaluation.

Stage 1 trains LREN + SIRN with latents extracted from the HQ pair. Stage 2 freezes LREN
and trains the diffusion model (CEN + denoiser) jointly with SIRN on latents estimated by
the full reverse chain.

A run is a pure function of (config, data, seed): model init is seeded, each epoch's batch
order comes from a generator keyed by (seed, epoch), flips by (seed, patch id, epoch) and
diffusion noise by (seed, step). Resuming from a mid-epoch checkpoint therefore replays
the same loss sequence.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Sampler
from tqdm import tqdm

from lib.checkpoint import (Checkpoint, load_module, model_params, optimizer_tensors, parameter_hash,
                            restore_optimizer, save_checkpoint)
from lib.config import ModelProfile, TrainConfig
from lib.datapipe import (DegradationSpec, ManifestEntry, StereoImagePair, StereoPatchDataset, Task,
                          bicubic_downsample, bicubic_upsample, degrade_pair, load_hq_pair, load_manifest,
                          sample_generator)
from lib.errors import CheckpointError, ConfigError, DataError, DimensionError, TrainingDivergedError
from lib.io import append_jsonl
from lib.losses import compute_pam, diffusion_loss, parallax_loss, reconstruction_loss, stage_objective
from lib.metrics import stereo_metrics
from models.common import per_view
from models.diffstereo import DiffStereo
from models.sirn import restore

logger = logging.getLogger(__name__)

# Fields left out of the checkpoint config snapshot so archives do not depend on where a run writes.
_PATH_FIELDS = ("manifest", "checkpoint_dir", "stage1_checkpoint", "log_path", "lq_dir")

METRIC_KEYS = ("psnr_l", "psnr_r", "psnr_avg", "ssim_l", "ssim_r", "ssim_avg")


# =============================================================================
# Data
# =============================================================================

class EpochBatchSampler(Sampler):
    """Seeded per-epoch batch order that can skip the batches already done on resume."""

    def __init__(self, num_samples: int, batch_size: int, seed: int):
        self.num_samples = num_samples
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.skip_first = 0

    def set_epoch(self, epoch: int, skip_first: int = 0) -> None:
        self.epoch = epoch
        self.skip_first = skip_first

    def batches(self) -> List[List[int]]:
        order = torch.randperm(self.num_samples, generator=sample_generator(self.seed, "epoch", self.epoch)).tolist()
        return [order[i:i + self.batch_size] for i in range(0, self.num_samples, self.batch_size)]

    def __iter__(self) -> Iterator[List[int]]:
        return iter(self.batches()[self.skip_first:])

    def __len__(self) -> int:
        return -(-self.num_samples // self.batch_size) - self.skip_first


def load_dataset(cfg: TrainConfig) -> StereoPatchDataset:
    if not cfg.manifest:
        raise ConfigError("Training needs a dataset manifest ('manifest' in the config)")
    entries = load_manifest(Path(cfg.manifest))
    lq_dir = Path(cfg.lq_dir) if cfg.lq_dir else None
    return StereoPatchDataset.from_entries(entries, cfg.degradation, cfg.patch, augment=cfg.augment, lq_dir=lq_dir)


# =============================================================================
# Model plumbing
# =============================================================================

def build_model(profile: ModelProfile, seed: int) -> DiffStereo:
    torch.manual_seed(seed)
    return DiffStereo.from_profile(profile)


def config_snapshot(cfg: TrainConfig) -> Dict:
    data = {k: v for k, v in cfg.to_dict().items() if k not in _PATH_FIELDS}
    data["model_profile"] = cfg.model_profile().to_dict()
    return data


def load_model(ckpt: Checkpoint) -> DiffStereo:
    """Rebuild the networks recorded in a checkpoint and load their weights."""
    if "model_profile" not in ckpt.config:
        raise CheckpointError("Checkpoint carries no model profile snapshot")
    model = DiffStereo.from_profile(ModelProfile.from_dict(ckpt.config["model_profile"]))
    for prefix in ("lren", "diffusion", "sirn"):
        load_module(getattr(model, prefix), ckpt, prefix)
    return model


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for m in cfg.milestone_epochs() if m <= epoch)
    return cfg.learning_rate * cfg.lr_gamma ** drops


def residual_pair(lq_left, lq_right, hq_left, hq_right, scale: int) -> StereoImagePair:
    """|HQ - up(LQ)| brought back to LQ resolution; the images the parallax terms compare."""
    def residual(lq, hq):
        if scale == 1:
            return (hq - lq).abs()
        return bicubic_downsample((hq - bicubic_upsample(lq, scale)).abs(), scale, clamp=False)
    return StereoImagePair(residual(lq_left, hq_left), residual(lq_right, hq_right))


# =============================================================================
# Step functions
# =============================================================================

StepFn = Callable[[DiffStereo, Dict[str, torch.Tensor], int], Dict[str, torch.Tensor]]


def _restoration_parts(model: DiffStereo, batch, z_l, z_r, cfg: TrainConfig) -> Dict[str, torch.Tensor]:
    out = model.sirn(batch["lq_left"], batch["lq_right"], z_l, z_r)
    gt = StereoImagePair(batch["hq_left"], batch["hq_right"])
    parts = {"rec": reconstruction_loss(StereoImagePair(out.left, out.right), gt)}
    if cfg.loss.lambda1:
        maps = compute_pam(out.feat_left, out.feat_right, cfg.loss.valid_threshold)
        residual = residual_pair(batch["lq_left"], batch["lq_right"], batch["hq_left"], batch["hq_right"],
                                 model.sirn.cfg.scale)
        parts["para"] = parallax_loss(residual, maps, cfg.loss)
    else:
        parts["para"] = out.left.new_zeros(())
    return parts


def stage1_step(cfg: TrainConfig) -> StepFn:
    def step_fn(model: DiffStereo, batch, step: int):
        z_l = z_r = None
        if model.sirn.cfg.use_lhfr:
            z_l, z_r = per_view(model.lren, batch["hq_left"], batch["hq_right"])
        parts = _restoration_parts(model, batch, z_l, z_r, cfg)
        parts["total"] = stage_objective(1, parts, cfg.loss)
        return parts
    return step_fn


def stage2_step(cfg: TrainConfig) -> StepFn:
    def step_fn(model: DiffStereo, batch, step: int):
        with torch.no_grad():
            z0_l, z0_r = per_view(model.lren, batch["hq_left"], batch["hq_right"])
        z_T_l, z_T_r = model.diffusion.noised_start(z0_l, z0_r, sample_generator(cfg.seed, "step", step))
        chain = model.diffusion.sample(batch["lq_left"], batch["lq_right"], z_T_l, z_T_r)
        parts = _restoration_parts(model, batch, chain.left, chain.right, cfg)
        parts["diff"] = diffusion_loss(chain.left, chain.right, z0_l, z0_r)
        parts["total"] = stage_objective(2, parts, cfg.loss)
        return parts
    return step_fn


# =============================================================================
# Training loop
# =============================================================================

def _checkpoint(model: DiffStereo, optimizer, named: Sequence[Tuple[str, nn.Parameter]], cfg: TrainConfig,
                epoch: int, step: int, epoch_step: int) -> Checkpoint:
    tensors = model_params({"lren": model.lren, "diffusion": model.diffusion, "sirn": model.sirn})
    tensors.update(optimizer_tensors(optimizer, named))
    return Checkpoint(tensors=tensors, config=config_snapshot(cfg), stage=cfg.stage, epoch=epoch, step=step,
                      rng_state=torch.get_rng_state(), extra={"epoch_step": epoch_step})


def _fit(cfg: TrainConfig, model: DiffStereo, dataset: StereoPatchDataset, trainable: Sequence[nn.Module],
         step_fn: StepFn, resume: Optional[Checkpoint]) -> Checkpoint:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad
             and any(p is q for m in trainable for q in m.parameters())]
    optimizer = torch.optim.Adam([p for _, p in named], lr=cfg.learning_rate, betas=cfg.betas)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=cfg.milestone_epochs(),
                                                     gamma=cfg.lr_gamma)

    start_epoch, step, skip = 0, 0, 0
    if resume is not None:
        if resume.stage != cfg.stage:
            raise CheckpointError(f"Cannot resume stage {cfg.stage} from a stage {resume.stage} checkpoint")
        restore_optimizer(optimizer, named, resume.optimizer_state())
        start_epoch, step, skip = resume.epoch, resume.step, int(resume.extra.get("epoch_step", 0))
        scheduler.last_epoch = start_epoch
        for group in optimizer.param_groups:
            group["lr"] = _lr_at(cfg, start_epoch)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        logger.info("Resuming stage %d at epoch %d, step %d (+%d batches)", cfg.stage, start_epoch, step, skip)

    ckpt_dir = Path(cfg.checkpoint_dir)
    log_path = Path(cfg.log_path) if cfg.log_path else ckpt_dir / f"train_stage{cfg.stage}.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    sampler = EpochBatchSampler(len(dataset), cfg.batch_size, cfg.seed)
    batches_per_epoch = len(sampler.batches())
    last = None

    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        dataset.set_epoch(epoch)
        sampler.set_epoch(epoch, skip if epoch == start_epoch else 0)
        epoch_step = sampler.skip_first
        loader = DataLoader(dataset, batch_sampler=sampler, num_workers=cfg.num_workers)
        lr = optimizer.param_groups[0]["lr"]

        for batch in tqdm(loader, desc=f"stage {cfg.stage} epoch {epoch + 1}/{cfg.epochs}", leave=False,
                          disable=None):
            parts = step_fn(model, batch, step)
            total = parts["total"]
            if not torch.isfinite(total):
                values = {k: float(v.detach()) for k, v in parts.items()}
                raise TrainingDivergedError(f"Non-finite loss at step {step} (epoch {epoch}): {values}")

            optimizer.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_([p for _, p in named], cfg.grad_clip)
            optimizer.step()
            step += 1
            epoch_step += 1

            record = {"stage": cfg.stage, "epoch": epoch, "step": step, "lr": lr}
            record.update({("loss" if k == "total" else k): float(v.detach()) for k, v in parts.items()})
            append_jsonl(log_path, record)

            done = cfg.max_steps is not None and step >= cfg.max_steps
            if done or (cfg.checkpoint_every and step % cfg.checkpoint_every == 0):
                if epoch_step == batches_per_epoch:
                    last = _checkpoint(model, optimizer, named, cfg, epoch + 1, step, 0)
                else:
                    last = _checkpoint(model, optimizer, named, cfg, epoch, step, epoch_step)
                save_checkpoint(ckpt_dir / f"stage{cfg.stage}_step{step:07d}.dsck", last)
            if done:
                save_checkpoint(ckpt_dir / f"stage{cfg.stage}_last.dsck", last)
                logger.info("Stopped at max_steps=%d", cfg.max_steps)
                return last

        scheduler.step()
        last = _checkpoint(model, optimizer, named, cfg, epoch + 1, step, 0)
        save_checkpoint(ckpt_dir / f"stage{cfg.stage}_epoch{epoch + 1:04d}.dsck", last)
        logger.info("Stage %d epoch %d done (step %d)", cfg.stage, epoch + 1, step)

    if last is None:
        last = _checkpoint(model, optimizer, named, cfg, cfg.epochs, step, 0)
    save_checkpoint(ckpt_dir / f"stage{cfg.stage}_last.dsck", last)
    return last


def train_stage1(cfg: TrainConfig, dataset: Optional[StereoPatchDataset] = None,
                 resume: Optional[Checkpoint] = None) -> Checkpoint:
    if cfg.stage != 1:
        raise ConfigError(f"train_stage1 needs stage 1, config says {cfg.stage}")
    dataset = dataset or load_dataset(cfg)
    model = build_model(cfg.model_profile(), cfg.seed)
    if resume is not None:
        for prefix in ("lren", "diffusion", "sirn"):
            load_module(getattr(model, prefix), resume, prefix)
    logger.info("Stage 1: %d patches, %d epochs, batch %d", len(dataset), cfg.epochs, cfg.batch_size)
    return _fit(cfg, model, dataset, [model.lren, model.sirn], stage1_step(cfg), resume)


def train_stage2(cfg: TrainConfig, stage1_ckpt: Checkpoint, dataset: Optional[StereoPatchDataset] = None,
                 resume: Optional[Checkpoint] = None) -> Checkpoint:
    if cfg.stage != 2:
        raise ConfigError(f"train_stage2 needs stage 2, config says {cfg.stage}")
    profile = cfg.model_profile()
    if not profile.sirn.use_lhfr:
        raise ConfigError("Stage 2 trains the diffusion model and needs use_lhfr")
    if stage1_ckpt.stage != 1:
        raise CheckpointError(f"Expected a stage 1 checkpoint, got stage {stage1_ckpt.stage}")
    if stage1_ckpt.config.get("model_profile") != profile.to_dict():
        raise CheckpointError("Stage 1 checkpoint was trained with a different model profile")

    dataset = dataset or load_dataset(cfg)
    model = build_model(profile, cfg.seed)
    source = resume if resume is not None else stage1_ckpt
    for prefix in ("lren", "sirn") if resume is None else ("lren", "diffusion", "sirn"):
        load_module(getattr(model, prefix), source, prefix)
    model.lren.requires_grad_(False)
    logger.info("Stage 2: LREN frozen (hash %s)", parameter_hash(model.lren)[:12])
    return _fit(cfg, model, dataset, [model.diffusion, model.sirn], stage2_step(cfg), resume)


# =============================================================================
# Evaluation
# =============================================================================

def _mean(items: List[Dict]) -> Dict[str, float]:
    if not items:
        return {}
    return {k: sum(item[k] for item in items) / len(items) for k in METRIC_KEYS}


def restore_pair(model: DiffStereo, lq: StereoImagePair, hq: Optional[StereoImagePair], seed: int,
                 stage: int) -> StereoImagePair:
    """Stage 1 models restore with latents extracted from HQ; stage 2 models sample them."""
    if stage == 1 and hq is not None and model.sirn.cfg.use_lhfr:
        with torch.no_grad():
            z_l, z_r = per_view(model.lren, hq.left.unsqueeze(0), hq.right.unsqueeze(0))
        out = restore(StereoImagePair(lq.left.unsqueeze(0), lq.right.unsqueeze(0), lq.id), z_l, z_r, model.sirn)
        return StereoImagePair(out.left[0], out.right[0], lq.id)
    return model.infer(lq, generator=sample_generator(seed, "infer", lq.id)).pair


def evaluate(ckpt: Checkpoint, entries: Sequence[ManifestEntry], task: Optional[Task] = None,
             seed: int = 0) -> Dict:
    """Per-image and mean PSNR/SSIM of the model and of the bicubic (or identity) baseline."""
    task = Task(task or ckpt.config.get("task", Task.SR4.value))
    model = load_model(ckpt)
    if model.sirn.cfg.scale != task.scale:
        raise CheckpointError(f"Checkpoint restores scale {model.sirn.cfg.scale}, "
                              f"task '{task.value}' needs {task.scale}")
    spec = DegradationSpec(task=task, seed=seed)

    items, baseline, errors = [], [], []
    for entry in entries:
        try:
            hq = load_hq_pair(entry, task.scale)
            lq = degrade_pair(hq, spec, sample_generator(seed, entry.id))
            pred = restore_pair(model, lq, hq, seed, ckpt.stage)
            base = lq if task.scale == 1 else lq.map(lambda v: bicubic_upsample(v, task.scale).clamp(0.0, 1.0))
            items.append({"id": entry.id, **stereo_metrics(pred, hq)})
            baseline.append({"id": entry.id, **stereo_metrics(base, hq)})
        except (DataError, DimensionError) as e:
            logger.warning("Skipping '%s': %s", entry.id, e)
            errors.append({"id": entry.id, "error": str(e)})

    return {
        "task": task.value,
        "stage": ckpt.stage,
        "latent_source": "hq" if ckpt.stage == 1 else "diffusion",
        "items": items,
        "mean": _mean(items),
        "baseline": {"items": baseline, "mean": _mean(baseline)},
        "errors": errors,
    }
