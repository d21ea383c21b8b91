"""
Image and metrics file IO.

Color images are float RGB in [0, 1] in memory and 8-bit PNG on disk; depth
is meters in memory and 16-bit PNG at ``depth_scale`` units per meter on disk;
normals map [-1, 1] to [0, 255] per channel.
"""

import json
from pathlib import Path
from typing import Any, Dict, Union

import cv2
import numpy as np

from .errors import DatasetError

PathLike = Union[str, Path]

DEPTH_PNG_MAX = 65535


def _ensure_parent(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, image: np.ndarray):
    if not cv2.imwrite(str(path), image):
        raise OSError(f"failed to write image {path}")


def read_color(path: PathLike) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f"unreadable color image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_color(path: PathLike, color: np.ndarray) -> Path:
    path = _ensure_parent(path)
    image = np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write(path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    return path


def read_depth(path: PathLike, depth_scale: float = 5000.0) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"unreadable depth image {path}")
    if raw.ndim != 2:
        raise DatasetError(f"depth image {path} has {raw.shape[2]} channels, expected 1")
    return raw.astype(np.float64) / depth_scale


def write_depth(path: PathLike, depth: np.ndarray, depth_scale: float = 5000.0) -> Path:
    """16-bit PNG; values beyond the PNG range saturate."""
    path = _ensure_parent(path)
    raw = np.clip(np.round(np.nan_to_num(depth) * depth_scale), 0, DEPTH_PNG_MAX).astype(np.uint16)
    _write(path, raw)
    return path


def write_normal(path: PathLike, normals: np.ndarray) -> Path:
    path = _ensure_parent(path)
    image = np.round((np.clip(normals, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    _write(path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    return path


def read_normal(path: PathLike) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f"unreadable normal image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float64) / 127.5 - 1.0


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = _ensure_parent(path)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
