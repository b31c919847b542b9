"""
Shared I/O utilities for DiffStereo scripts.

JSON documents, JSON-lines logs and manifests, 8-bit PNG images and LHFR dumps.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List

import numpy as np
import torch
from PIL import Image

from lib.errors import DataError


# =============================================================================
# JSON
# =============================================================================

def load_json(file_path: Path) -> Any:
    """Load a JSON document from file."""
    file_path = Path(file_path)
    if not file_path.exists():
        raise DataError(f"File not found: {file_path}")
    try:
        return json.loads(file_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Invalid JSON in {file_path}: {e}") from e


def save_json(file_path: Path, data: Any, indent: int = 2) -> None:
    """Save data as JSON to file."""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=indent, ensure_ascii=False, sort_keys=True)
        f.write('\n')


def load_jsonl(file_path: Path) -> List[Dict]:
    """Load a JSON-lines file. Blank lines are skipped."""
    file_path = Path(file_path)
    if not file_path.exists():
        raise DataError(f"File not found: {file_path}")
    records = []
    for line_no, line in enumerate(file_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataError(f"{file_path}:{line_no}: invalid JSON line: {e}") from e
    return records


def save_jsonl(file_path: Path, records: Iterable[Dict]) -> None:
    """Write records as JSON lines, replacing the file."""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')


def append_jsonl(file_path: Path, record: Dict) -> None:
    """Append one record to a JSON-lines file."""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True) + '\n')


# =============================================================================
# Images
# =============================================================================

def read_png(file_path: Path) -> torch.Tensor:
    """Read an 8-bit image as a float32 tensor 3 x H x W in [0, 1]."""
    file_path = Path(file_path)
    if not file_path.exists():
        raise DataError(f"Image not found: {file_path}")
    try:
        with Image.open(file_path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DataError(f"Unreadable image {file_path}: {e}") from e
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Convert a 3 x H x W tensor in [0, 1] to an H x W x 3 uint8 array (round-clamp)."""
    array = img.detach().to(torch.float64).clamp(0.0, 1.0).mul(255.0).round()
    return array.to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def write_png(file_path: Path, img: torch.Tensor) -> None:
    """Write a 3 x H x W tensor in [0, 1] as an 8-bit RGB PNG."""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(file_path, format="PNG")


def write_lhfr(stem: Path, z: torch.Tensor) -> Dict[str, str]:
    """Dump an H x W latent map as a min-max normalized grayscale PNG plus a raw sidecar.

    The sidecar `<stem>.f32` holds the unnormalized values as little-endian float32,
    row-major, H x W.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    z = z.detach().to(torch.float64).cpu()
    if z.dim() != 2:
        raise DataError(f"LHFR dump expects an H x W map, got shape {tuple(z.shape)}")
    lo, hi = z.min(), z.max()
    span = (hi - lo).item()
    gray = (z - lo) / span if span > 0 else torch.zeros_like(z)
    gray_u8 = gray.mul(255.0).round().clamp(0, 255).to(torch.uint8).numpy()

    # ids may contain dots; append rather than replace a suffix
    png_path = stem.parent / f"{stem.name}.png"
    raw_path = stem.parent / f"{stem.name}.f32"
    Image.fromarray(gray_u8).save(png_path, format="PNG")
    z.numpy().astype("<f4").tofile(raw_path)
    return {"png": str(png_path), "raw": str(raw_path)}


def read_lhfr_raw(file_path: Path, height: int, width: int) -> torch.Tensor:
    """Read a raw float32 LHFR sidecar back into an H x W tensor."""
    array = np.fromfile(Path(file_path), dtype="<f4")
    if array.size != height * width:
        raise DataError(f"{file_path}: expected {height * width} values, found {array.size}")
    return torch.from_numpy(array.reshape(height, width).astype(np.float32))
