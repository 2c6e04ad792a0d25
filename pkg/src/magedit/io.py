"""Image, mask and raw-array files."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from magedit.errors import ConfigError

MASK_THRESHOLD = 128


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc


def write_png(path, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


def read_mask(path) -> np.ndarray:
    """8-bit grayscale PNG; values >= 128 are inside the edit region."""
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read mask {path}: {exc}") from exc
    return gray >= MASK_THRESHOLD


def write_mask(path, mask: np.ndarray) -> Path:
    return write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0))


def write_pgm(path, mask: np.ndarray) -> Path:
    """Binary PGM (P5) with 255 inside the mask; for eyeballing the 16x16 attention mask."""
    m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode() + m.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ConfigError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_latent(path, z: torch.Tensor, **meta) -> Path:
    """Raw little-endian float32 array plus a ``.json`` sidecar with shape and dtype."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    z.detach().cpu().numpy().astype("<f4").tofile(path)
    sidecar = {"shape": list(z.shape), "dtype": "float32-le", **meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def read_latent(path) -> torch.Tensor:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arr = np.fromfile(path, dtype="<f4").reshape(meta["shape"])
    return torch.as_tensor(arr.astype(np.float64))
