"""
Shared configuration for DiffStereo scripts.

Only INPUT paths are centralized here. Each command maintains its own OUTPUT paths.
Model profiles and the training config loader live here too.
"""

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from lib.datapipe import DegradationSpec, PatchSpec, Task
from lib.errors import ConfigError, ParameterError
from lib.io import load_json
from lib.losses import LossWeights
from models.diffusion import DiffusionConfig
from models.lren import LrenParams
from models.sirn import SirnConfig

# Compute paths relative to lib/ location
SCRIPT_DIR = Path(__file__).parent.parent  # scripts/
ROOT_DIR = SCRIPT_DIR.parent               # repo root
DATA_DIR = ROOT_DIR / "data"
RUNS_DIR = ROOT_DIR / "runs"
REPORTS_DIR = ROOT_DIR / "reports"

ENV_SEED = "DIFFSTEREO_SEED"


def seed_override(seed: int) -> int:
    """Return $DIFFSTEREO_SEED when set, otherwise `seed`."""
    raw = os.environ.get(ENV_SEED)
    if raw is None or raw == "":
        return seed
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_SEED} must be an integer, got '{raw}'")


# =============================================================================
# Model profiles
# =============================================================================

@dataclass(frozen=True)
class ModelProfile:
    lren: LrenParams
    sirn: SirnConfig
    diffusion: DiffusionConfig

    def to_dict(self) -> Dict:
        return {
            "lren": _as_dict(self.lren),
            "sirn": _as_dict(self.sirn),
            "diffusion": _as_dict(self.diffusion),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelProfile":
        try:
            return cls(
                lren=_build(LrenParams, data["lren"], "model.lren"),
                sirn=_build(SirnConfig, data["sirn"], "model.sirn"),
                diffusion=_build(DiffusionConfig, data["diffusion"], "model.diffusion"),
            )
        except KeyError as e:
            raise ConfigError(f"Model snapshot is missing section {e}") from e


PROFILES = {
    "desk": {
        "lren": {"width": 16, "num_res_blocks": 2, "compress_channels": (16, 8)},
        "sirn": {"num_cibs": 2, "channels": 32, "heads": 4},
        "diffusion": {"cen_width": 16, "denoiser_width": 16},
    },
    "paper": {
        "lren": {"width": 64, "num_res_blocks": 4, "compress_channels": (32, 16)},
        "sirn": {"num_cibs": 8, "channels": 256, "heads": 8},
        "diffusion": {"cen_width": 32, "denoiser_width": 64},
    },
}


def build_profile(name: str, task: Task, overrides: Optional[Dict] = None) -> ModelProfile:
    """Profile defaults, then the task's scale, then per-section overrides.

    A `guidance` override in any section applies to all three networks; the vector
    length follows the SIRN width.
    """
    if name not in PROFILES:
        raise ConfigError(f"Unknown profile '{name}'. Must be one of {list(PROFILES)}")
    overrides = overrides or {}
    unknown = set(overrides) - {"lren", "sirn", "diffusion"}
    if unknown:
        raise ConfigError(f"Unknown model sections: {sorted(unknown)}")

    scale = Task(task).scale
    sections = {k: dict(v) for k, v in PROFILES[name].items()}
    for key, values in overrides.items():
        sections[key].update(values)

    sirn = _build(SirnConfig, {"scale": scale, **sections["sirn"]}, "model.sirn")
    guidance = next((s["guidance"] for s in (overrides.get("sirn", {}), overrides.get("lren", {}),
                                             overrides.get("diffusion", {})) if "guidance" in s), sirn.guidance)
    shared = {"guidance": guidance, "vector_length": sirn.channels}
    sirn = replace(sirn, guidance=guidance)
    lren = _build(LrenParams, {"unshuffle_factor": scale, **sections["lren"], **shared}, "model.lren")
    diffusion = _build(DiffusionConfig, {**sections["diffusion"], **shared}, "model.diffusion")
    if sirn.scale != lren.unshuffle_factor:
        raise ConfigError(f"LREN unshuffle factor {lren.unshuffle_factor} must equal SIRN scale {sirn.scale}")
    return ModelProfile(lren, sirn, diffusion)


# =============================================================================
# Training config
# =============================================================================

@dataclass
class TrainConfig:
    stage: int = 1
    task: Task = Task.SR4
    profile: str = "desk"
    manifest: Optional[str] = None
    epochs: Optional[int] = None
    batch_size: int = 48
    learning_rate: float = 2e-4
    lr_milestones: Tuple[float, ...] = (0.6, 0.85)
    lr_gamma: float = 0.5
    betas: Tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: Optional[int] = None
    checkpoint_dir: str = str(RUNS_DIR / "checkpoints")
    checkpoint_every: int = 0
    stage1_checkpoint: Optional[str] = None
    log_path: Optional[str] = None
    lq_dir: Optional[str] = None
    num_workers: int = 0
    augment: bool = True
    degradation: DegradationSpec = None
    patch: PatchSpec = field(default_factory=PatchSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    model: Dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.task = Task(self.task)
        except ValueError:
            raise ConfigError(f"Unknown task '{self.task}'. Must be one of {[t.value for t in Task]}")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs is None:
            self.epochs = 90 if self.stage == 1 else 300
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        self.lr_milestones = tuple(self.lr_milestones)
        self.betas = tuple(self.betas)
        if self.degradation is None:
            self.degradation = DegradationSpec(task=self.task, seed=self.seed)
        elif self.degradation.task != self.task:
            raise ConfigError(f"degradation.task '{self.degradation.task.value}' differs from task '{self.task.value}'")
        self.model_profile()

    def model_profile(self) -> ModelProfile:
        return build_profile(self.profile, self.task, self.model)

    def milestone_epochs(self):
        return sorted({max(1, int(round(f * self.epochs))) for f in self.lr_milestones})

    def to_dict(self) -> Dict:
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("degradation", "patch", "loss"):
                value = _as_dict(value)
            elif isinstance(value, Task):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            data[f.name] = value
        return data


def _as_dict(obj) -> Dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, Task):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _build(cls, data: Dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (ParameterError, TypeError) as e:
        raise ConfigError(f"Invalid '{section}': {e}") from e


def train_config_from_dict(data: Dict, seed: Optional[int] = None) -> TrainConfig:
    data = dict(data)
    task = data.get("task", Task.SR4.value)
    cfg_seed = seed_override(data.get("seed", 0) if seed is None else seed)
    data["seed"] = cfg_seed
    if "degradation" in data:
        section = {"task": task, "seed": cfg_seed, **data["degradation"]}
        # --seed and $DIFFSTEREO_SEED win over a section seed too
        section["seed"] = seed_override(section["seed"] if seed is None else seed)
        data["degradation"] = _build(DegradationSpec, section, "degradation")
    if "patch" in data:
        data["patch"] = _build(PatchSpec, data["patch"], "patch")
    if "loss" in data:
        data["loss"] = _build(LossWeights, data["loss"], "loss")
    return _build(TrainConfig, data, "config")


def load_train_config(file_path: Path, seed: Optional[int] = None) -> TrainConfig:
    data = load_json(file_path)
    if not isinstance(data, dict):
        raise ConfigError(f"{file_path}: config must be a JSON object")
    return train_config_from_dict(data, seed)
