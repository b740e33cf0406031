"""Vulnerable patches and Gaussian heatmap targets from a blending boundary.

Grid coordinates are 0-indexed ``(px, py)`` = (column, row).
"""
from __future__ import annotations

from typing import Optional

import numpy as np

TIE_TOL = 1e-12


class GridError(ValueError):
    pass


def patchify(bmap: np.ndarray, p: int) -> np.ndarray:
    """Split an ``H x W`` map into a ``(side, side, P, P)`` block grid.

    ``out[i, j]`` is the block at grid row ``i``, column ``j``.
    """
    h, w = bmap.shape
    if h % p or w % p:
        raise GridError(f"patch size {p} does not divide {h}x{w}")
    if h != w:
        raise GridError(f"patch grid needs a square map, got {h}x{w}")
    g = h // p
    return bmap.reshape(g, p, g, p).swapaxes(1, 2)


def unpatchify(grid: np.ndarray) -> np.ndarray:
    g, _, p, _ = grid.shape
    return grid.swapaxes(1, 2).reshape(g * p, g * p)


def aggregate(block: np.ndarray, mode: str = "max") -> float:
    if mode == "max":
        return float(np.max(block))
    if mode == "mean":
        return float(np.mean(block))
    raise ValueError(f"unknown aggregation mode {mode!r}")


def patch_scores(bmap: np.ndarray, p: int, mode: str = "max") -> np.ndarray:
    grid = patchify(bmap, p)
    if mode == "max":
        return grid.max(axis=(2, 3))
    if mode == "mean":
        return grid.mean(axis=(2, 3))
    raise ValueError(f"unknown aggregation mode {mode!r}")


def vulnerable_patches(bmap: np.ndarray, p: int, mode: str = "max") -> set[tuple[int, int]]:
    """Grid cells whose aggregated boundary ties the global maximum."""
    scores = patch_scores(bmap, p, mode)
    top = scores.max()
    if top <= 0:
        return set()
    rows, cols = np.nonzero(scores >= top - TIE_TOL)
    return {(int(c), int(r)) for r, c in zip(rows, cols)}


def gaussian_map(pt: tuple[int, int], side: int, sigma: float = 1.0) -> np.ndarray:
    px, py = pt
    if not (0 <= px < side and 0 <= py < side):
        raise GridError(f"patch {pt} outside a {side}x{side} grid")
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    return np.exp(-((x - px) ** 2 + (y - py) ** 2) / (2.0 * sigma**2))


def ground_truth_heatmap(
    bmap: Optional[np.ndarray],
    p: int,
    mode: str = "max",
    sigma: float = 1.0,
    side: Optional[int] = None,
) -> np.ndarray:
    """Heatmap target; pass ``bmap=None`` (with ``side``) for a real sample."""
    if bmap is None:
        if side is None:
            raise GridError("real-sample target needs the grid side")
        return np.zeros((side, side))
    side = bmap.shape[0] // p
    target = np.zeros((side, side))
    for pt in vulnerable_patches(bmap, p, mode):
        np.maximum(target, gaussian_map(pt, side, sigma), out=target)
    return target
