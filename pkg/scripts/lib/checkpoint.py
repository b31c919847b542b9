"""
Checkpoint archives.

Layout of a `.dsck` file:

    b"DSCK" | u64 little-endian manifest length | manifest JSON (utf-8) | tensor payloads

The manifest lists every tensor (name, dtype, shape, offset, nbytes; offsets relative to
the start of the payload block) plus a `meta` object with the config snapshot, stage, epoch,
step and RNG state. Payloads are little-endian float32. The manifest carries no timestamps
and is written with sorted keys, so identical runs produce byte-identical archives.
"""

import base64
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from lib.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DSCK"
FORMAT_VERSION = 1
OPTIMIZER_PREFIX = "optimizer/"

ModelParams = Dict[str, torch.Tensor]


@dataclass
class Checkpoint:
    tensors: ModelParams
    config: Dict
    stage: int
    epoch: int
    step: int = 0
    rng_state: Optional[torch.Tensor] = None
    extra: Dict = field(default_factory=dict)

    def module_state(self, prefix: str) -> ModelParams:
        """Tensors stored under `<prefix>.`, with the prefix removed."""
        head = prefix + "."
        state = {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}
        if not state:
            raise CheckpointError(f"Checkpoint has no '{prefix}' parameters")
        return state

    def optimizer_state(self) -> ModelParams:
        return {k[len(OPTIMIZER_PREFIX):]: v for k, v in self.tensors.items() if k.startswith(OPTIMIZER_PREFIX)}


# =============================================================================
# Parameter helpers
# =============================================================================

def model_params(modules: Dict[str, nn.Module]) -> ModelParams:
    """Flatten named modules into one prefixed state dict."""
    params = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            params[f"{prefix}.{name}"] = tensor.detach().clone()
    return params


def load_module(module: nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    try:
        module.load_state_dict(ckpt.module_state(prefix))
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint '{prefix}' parameters do not fit the configured model: {e}") from e


def parameter_hash(source) -> str:
    """sha256 over sorted (name, shape, bytes) of a module or a tensor mapping."""
    tensors = source.state_dict() if isinstance(source, nn.Module) else source
    digest = hashlib.sha256()
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().contiguous().numpy()
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def optimizer_tensors(optimizer: torch.optim.Optimizer,
                      named_params: Iterable[Tuple[str, nn.Parameter]]) -> ModelParams:
    """Adam moments and step counts keyed by parameter name."""
    out = {}
    for name, param in named_params:
        state = optimizer.state.get(param)
        if not state:
            continue
        for key, value in state.items():
            out[f"{OPTIMIZER_PREFIX}{name}/{key}"] = torch.as_tensor(value, dtype=torch.float32).detach().clone()
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, named_params: Iterable[Tuple[str, nn.Parameter]],
                      tensors: ModelParams) -> None:
    for name, param in named_params:
        state = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            value = tensors.get(f"{name}/{key}")
            if value is not None:
                state[key] = value.clone().to(param.device) if key != "step" else value.clone()
        if state:
            optimizer.state[param] = state


# =============================================================================
# Archive I/O
# =============================================================================

def save_checkpoint(file_path: Path, ckpt: Checkpoint) -> Path:
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)

    entries, payloads, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        array = ckpt.tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        data = array.tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(array.shape),
                        "offset": offset, "nbytes": len(data)})
        payloads.append(data)
        offset += len(data)

    meta = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": None if ckpt.rng_state is None
        else base64.b64encode(ckpt.rng_state.cpu().numpy().tobytes()).decode("ascii"),
        "extra": ckpt.extra,
    }
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = file_path.with_suffix(file_path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for data in payloads:
            f.write(data)
    tmp.replace(file_path)
    logger.debug("Saved checkpoint %s (%d tensors, %d bytes)", file_path, len(entries), offset)
    return file_path


def load_checkpoint(file_path: Path) -> Checkpoint:
    file_path = Path(file_path)
    if not file_path.exists():
        raise CheckpointError(f"Checkpoint not found: {file_path}")
    blob = file_path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{file_path} is not a DiffStereo checkpoint")
    try:
        (length,) = struct.unpack("<Q", blob[4:12])
        manifest = json.loads(blob[12:12 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{file_path}: corrupt manifest: {e}") from e

    meta = manifest.get("meta", {})
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{file_path}: unsupported format version {meta.get('format_version')}")

    base = 12 + length
    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        data = blob[start:start + entry["nbytes"]]
        if len(data) != entry["nbytes"]:
            raise CheckpointError(f"{file_path}: truncated payload for '{entry['name']}'")
        if entry["name"] in tensors:
            raise CheckpointError(f"{file_path}: duplicate tensor name '{entry['name']}'")
        array = np.frombuffer(data, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        tensors[entry["name"]] = torch.from_numpy(array)

    rng_state = None
    if meta.get("rng_state"):
        raw = np.frombuffer(base64.b64decode(meta["rng_state"]), dtype=np.uint8).copy()
        rng_state = torch.from_numpy(raw)

    return Checkpoint(tensors=tensors, config=meta.get("config", {}), stage=meta["stage"],
                      epoch=meta["epoch"], step=meta.get("step", 0), rng_state=rng_state,
                      extra=meta.get("extra", {}))
