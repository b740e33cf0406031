"""PNG and landmark sidecar I/O."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .synthesis import LandmarkSet

PathLike = Union[str, Path]


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb.transpose(2, 0, 1).copy()


def write_image(path: PathLike, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def write_gray(path: PathLike, arr: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr), mode="L").save(path, format="PNG")


def read_gray(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def read_landmarks(path: PathLike, height: int, width: int) -> LandmarkSet:
    doc = json.loads(Path(path).read_text())
    return LandmarkSet(np.asarray(doc["points"], dtype=np.float64), height, width)


def write_landmarks(path: PathLike, lms: LandmarkSet) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"points": lms.points.round(6).tolist()}) + "\n")


def heatmap_overlay(img: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Upsample a grid heatmap to image size (nearest) and tint it red over the image."""
    h, w = img.shape[-2:]
    up = np.kron(heat, np.ones((h // heat.shape[0], w // heat.shape[1])))
    red = np.zeros_like(img)
    red[0] = 1.0
    return (1 - alpha * up) * img + alpha * up * red
