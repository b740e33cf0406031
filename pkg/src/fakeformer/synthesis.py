"""Blending-based pseudo-fake synthesis.

Images are ``(3, H, W)`` float64 arrays in [0, 1]; masks and boundary maps are
``(H, W)`` float64 arrays.  Landmark coordinates are ``(x, y)`` with pixel
centres at integer positions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

RngLike = Union[np.random.Generator, int]


class SynthesisError(ValueError):
    pass


@dataclass
class LandmarkSet:
    points: np.ndarray  # (K, 2) as (x, y)
    height: int
    width: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)

    def in_bounds(self) -> bool:
        x, y = self.points[:, 0], self.points[:, 1]
        return bool(np.all((x >= 0) & (x <= self.width - 1) & (y >= 0) & (y <= self.height - 1)))


@dataclass
class DeformParams:
    max_shift: float = 4.0
    scale_range: tuple = (0.95, 1.05)
    elastic_max: float = 4.0
    elastic_sigma: float = 10.0
    kernel_sizes: tuple = (5, 7, 9, 11, 13, 15)

    @classmethod
    def identity(cls) -> "DeformParams":
        return cls(max_shift=0.0, scale_range=(1.0, 1.0), elastic_max=0.0, kernel_sizes=(1,))


@dataclass
class SynthParams:
    brightness: float = 0.1
    contrast: float = 0.1
    hue: float = 0.1
    max_translate: float = 3.0
    max_resize: float = 0.02
    deform: DeformParams = field(default_factory=DeformParams)

    @classmethod
    def identity(cls) -> "SynthParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, DeformParams.identity())

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        d = dict(d)
        deform = d.pop("deform", {})
        if isinstance(deform, dict):
            deform = dict(deform)
            for k in ("scale_range", "kernel_sizes"):
                if k in deform:
                    deform[k] = tuple(deform[k])
            deform = DeformParams(**deform)
        return cls(deform=deform, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deform"]["scale_range"] = list(d["deform"]["scale_range"])
        d["deform"]["kernel_sizes"] = list(d["deform"]["kernel_sizes"])
        return d


@dataclass
class PseudoFake:
    image: np.ndarray
    boundary: np.ndarray
    mask: np.ndarray
    label: str = "fake"
    provenance: dict = field(default_factory=dict)


def _rng(rng: RngLike) -> tuple[np.random.Generator, Optional[int]]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(int(rng)), int(rng)


# masks


def _hull_vertices(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        raise SynthesisError("convex hull needs at least 3 landmarks")
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
        raise SynthesisError("landmarks are collinear; hull is degenerate")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise SynthesisError(f"degenerate landmark hull: {exc}") from exc
    return pts[hull.vertices]  # counter-clockwise


def convex_hull_mask(lms: Union[LandmarkSet, np.ndarray], dims: tuple) -> np.ndarray:
    """Binary mask of pixel centres inside (or on) the landmark hull."""
    h, w = dims
    pts = lms.points if isinstance(lms, LandmarkSet) else np.asarray(lms, dtype=np.float64)
    verts = _hull_vertices(pts)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    inside = np.ones((h, w), dtype=bool)
    nxt = np.roll(verts, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(verts, nxt):
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= -1e-9
    return inside.astype(np.float64)


def gaussian_kernel1d(ksize: int, sigma: Optional[float] = None) -> np.ndarray:
    if ksize <= 1:
        return np.ones(1)
    if sigma is None:
        sigma = 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8
    r = np.arange(ksize) - (ksize - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(arr: np.ndarray, ksize: int, sigma: Optional[float] = None) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, edge-clamped."""
    if ksize <= 1:
        return arr.copy()
    k = gaussian_kernel1d(ksize, sigma)
    out = ndimage.convolve1d(arr, k, axis=-1, mode="nearest")
    return ndimage.convolve1d(out, k, axis=-2, mode="nearest")


def _sample(arr: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sampling of a 2-D or CHW array with edge clamping."""
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr, [rows, cols], order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(c, [rows, cols], order=1, mode="nearest") for c in arr])


def deform_mask(mask: np.ndarray, rng: RngLike, params: Optional[DeformParams] = None) -> np.ndarray:
    """Random affine jitter, smooth elastic displacement, then Gaussian blur."""
    params = params or DeformParams()
    gen, _ = _rng(rng)
    h, w = mask.shape
    tx, ty = gen.uniform(-1.0, 1.0, size=2) * params.max_shift
    scale = gen.uniform(*params.scale_range)
    field_y = ndimage.gaussian_filter(gen.normal(size=(h, w)), params.elastic_sigma, mode="nearest")
    field_x = ndimage.gaussian_filter(gen.normal(size=(h, w)), params.elastic_sigma, mode="nearest")
    amp = gen.uniform(0.0, 1.0) * params.elastic_max
    ksize = int(gen.choice(params.kernel_sizes))

    out = mask.astype(np.float64)
    if params.max_shift > 0 or params.scale_range != (1.0, 1.0) or params.elastic_max > 0:
        peak = max(np.abs(field_x).max(), np.abs(field_y).max(), 1e-12)
        dy, dx = field_y / peak * amp, field_x / peak * amp
        total = out.sum()
        if total > 0:
            ys, xs = np.mgrid[0:h, 0:w]
            cy = (out * ys).sum() / total
            cx = (out * xs).sum() / total
        else:
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
        rows = cy + (rows + dy - cy - ty) / scale
        cols = cx + (cols + dx - cx - tx) / scale
        out = _sample(out, rows, cols)
    out = gaussian_blur(out, ksize)
    return np.clip(out, 0.0, 1.0)


# blending


def blend(fg: np.ndarray, bg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if fg.shape != bg.shape or fg.shape[-2:] != mask.shape:
        raise SynthesisError(f"blend dims differ: fg{fg.shape} bg{bg.shape} mask{mask.shape}")
    return mask * fg + (1.0 - mask) * bg


def blending_boundary(mask: np.ndarray) -> np.ndarray:
    return 4.0 * mask * (1.0 - mask)


# photometric and geometric transforms

_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def adjust_color(img: np.ndarray, brightness: float, contrast: float, hue: float) -> np.ndarray:
    """Additive brightness, contrast about the mean, hue rotation (fraction of a turn)."""
    out = img
    if hue:
        th = 2.0 * np.pi * hue
        rot = np.array([[1, 0, 0], [0, np.cos(th), -np.sin(th)], [0, np.sin(th), np.cos(th)]])
        m = _YIQ_INV @ rot @ _YIQ
        out = np.einsum("ij,jhw->ihw", m, out)
    if contrast:
        mu = out.mean()
        out = (out - mu) * (1.0 + contrast) + mu
    if brightness:
        out = out + brightness
    return np.clip(out, 0.0, 1.0)


def shift_resize(img: np.ndarray, tx: float, ty: float, scale: float) -> np.ndarray:
    """Translate by (tx, ty) px and rescale about the image centre."""
    if tx == 0 and ty == 0 and scale == 1.0:
        return img.copy()
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.clip(_sample(img, cy + (rows - cy - ty) / scale, cx + (cols - cx - tx) / scale), 0.0, 1.0)


def _photometric(img, gen, params: SynthParams) -> tuple[np.ndarray, dict]:
    b = gen.uniform(-1, 1) * params.brightness
    c = gen.uniform(-1, 1) * params.contrast
    hu = gen.uniform(-1, 1) * params.hue
    return adjust_color(img, b, c, hu), {"brightness": b, "contrast": c, "hue": hu}


def self_blend(
    img: np.ndarray, mask: np.ndarray, rng: RngLike, params: Optional[SynthParams] = None
) -> PseudoFake:
    """Self-blend ``img`` through an already-deformed soft mask."""
    params = params or SynthParams()
    gen, seed = _rng(rng)
    source, src_info = _photometric(img, gen, params)
    target, tgt_info = _photometric(img, gen, params)
    tx, ty = gen.uniform(-1, 1, size=2) * params.max_translate
    scale = 1.0 + gen.uniform(-1, 1) * params.max_resize
    source = shift_resize(source, tx, ty, scale)
    image = np.clip(blend(source, target, mask), 0.0, 1.0)
    prov = {
        "mode": "SBI",
        "seed": seed,
        "source": src_info,
        "target": tgt_info,
        "shift": [float(tx), float(ty)],
        "scale": float(scale),
    }
    return PseudoFake(image, blending_boundary(mask), mask, "fake", prov)


def make_self_blended(
    img: np.ndarray, lms: LandmarkSet, rng: RngLike, params: Optional[SynthParams] = None
) -> PseudoFake:
    params = params or SynthParams()
    gen, seed = _rng(rng)
    hull = convex_hull_mask(lms, img.shape[-2:])
    mask = deform_mask(hull, gen, params.deform)
    fake = self_blend(img, mask, gen, params)
    fake.provenance["seed"] = seed
    return fake


def fit_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 2x3 affine ``A`` with ``dst ~ A @ [x, y, 1]``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape:
        raise SynthesisError("landmark sets differ in size")
    design = np.hstack([src, np.ones((len(src), 1))])
    if np.linalg.matrix_rank(design) < 3:
        raise SynthesisError("landmark fit is rank deficient")
    sol, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return sol.T


def warp_affine(img: np.ndarray, affine: np.ndarray, dims: tuple) -> np.ndarray:
    """Resample ``img`` into a ``dims`` frame where ``affine`` maps source to output coords."""
    lin, t = affine[:, :2], affine[:, 2]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise SynthesisError("affine warp is singular")
    inv = np.linalg.inv(lin)
    h, w = dims
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    out_xy = np.stack([cols.ravel() - t[0], rows.ravel() - t[1]])
    src = inv @ out_xy
    sx, sy = src[0].reshape(h, w), src[1].reshape(h, w)
    return np.clip(_sample(img, sy, sx), 0.0, 1.0)


def make_cross_blended(
    fg: np.ndarray,
    fg_lms: LandmarkSet,
    bg: np.ndarray,
    bg_lms: LandmarkSet,
    rng: RngLike,
    params: Optional[SynthParams] = None,
) -> PseudoFake:
    params = params or SynthParams()
    if fg.shape != bg.shape:
        raise SynthesisError(f"fg {fg.shape} and bg {bg.shape} differ")
    gen, seed = _rng(rng)
    affine = fit_affine(fg_lms.points, bg_lms.points)
    warped = warp_affine(fg, affine, bg.shape[-2:])
    mask = deform_mask(convex_hull_mask(bg_lms, bg.shape[-2:]), gen, params.deform)
    image = np.clip(blend(warped, bg, mask), 0.0, 1.0)
    prov = {"mode": "BI", "seed": seed, "affine": affine.tolist()}
    return PseudoFake(image, blending_boundary(mask), mask, "fake", prov)


# procedural faces


def _ellipse(ys, xs, cy, cx, ry, rx):
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def _arc(cx, cy, rx, ry, t0, t1, n):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


GRAIN = 0.04


def gen_toy_face(seed: int, size: int = 64, n_landmarks: int = 68) -> tuple[np.ndarray, LandmarkSet]:
    """Render a face-like image with a 68-point (or 81-point) landmark layout."""
    if n_landmarks not in (68, 81):
        raise SynthesisError("n_landmarks must be 68 or 81")
    gen = np.random.default_rng(seed)
    s = float(size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    # background: one colour with smooth shading plus fine grain
    base = gen.uniform(0.15, 0.85, size=3)
    low = ndimage.gaussian_filter(gen.normal(size=(size, size)), s / 8)
    low /= max(np.abs(low).max(), 1e-9)
    img = base[:, None, None] * (1.0 + 0.3 * low[None]) + 0.01 * gen.normal(size=(3, size, size))

    cx = s / 2 + gen.uniform(-0.05, 0.05) * s
    cy = s / 2 + gen.uniform(-0.06, -0.01) * s
    rx = gen.uniform(0.27, 0.31) * s
    ry = gen.uniform(0.3, 0.34) * s
    skin = np.array([gen.uniform(0.75, 0.95), gen.uniform(0.35, 0.55), gen.uniform(0.15, 0.35)])
    # skin extends past the jaw line and above the brows, so the landmark hull
    # lies inside skin as it does on real faces
    frx, fry, fcy = 1.45 * rx, 1.35 * ry, cy - 0.1 * ry
    face = _ellipse(ys, xs, fcy, cx, fry, frx)
    shade = 1.0 - 0.25 * (((ys - fcy) / fry) ** 2 + ((xs - cx) / frx) ** 2)
    # crisp pixel-level skin texture; resampling a blended source softens it
    grain = gen.normal(size=(3, size, size))
    skin_img = skin[:, None, None] * shade[None] + GRAIN * grain
    img = np.where(face[None], skin_img, img)

    eye_dx = gen.uniform(0.36, 0.44) * rx
    eye_y = cy - gen.uniform(0.12, 0.2) * ry
    eye_rx, eye_ry = gen.uniform(0.16, 0.22) * rx, gen.uniform(0.07, 0.1) * ry
    iris = gen.uniform(0.05, 0.35, size=3)
    for sx in (-1, 1):
        ex = cx + sx * eye_dx
        white = _ellipse(ys, xs, eye_y, ex, eye_ry, eye_rx)
        img = np.where(white[None], np.array([0.92, 0.92, 0.9])[:, None, None], img)
        pupil = _ellipse(ys, xs, eye_y, ex, eye_ry * 0.9, eye_rx * 0.45)
        img = np.where(pupil[None], iris[:, None, None], img)
    brow_y = eye_y - gen.uniform(0.16, 0.22) * ry
    brow_col = skin * gen.uniform(0.3, 0.55)
    for sx in (-1, 1):
        bx = cx + sx * eye_dx
        brow = _ellipse(ys, xs, brow_y, bx, 0.035 * ry + 0.6, eye_rx * 1.3)
        img = np.where(brow[None], brow_col[:, None, None], img)

    nose_top, nose_bot = eye_y + 0.05 * ry, cy + gen.uniform(0.15, 0.22) * ry
    nose_w = gen.uniform(0.14, 0.2) * rx
    nostril = _ellipse(ys, xs, nose_bot, cx, 0.04 * ry + 0.5, nose_w)
    img = np.where(nostril[None], (skin * 0.6)[:, None, None], img)

    mouth_y = cy + gen.uniform(0.42, 0.52) * ry
    mouth_rx, mouth_ry = gen.uniform(0.3, 0.42) * rx, gen.uniform(0.07, 0.11) * ry
    lip = np.array([gen.uniform(0.55, 0.85), gen.uniform(0.15, 0.35), gen.uniform(0.2, 0.35)])
    mouth = _ellipse(ys, xs, mouth_y, cx, mouth_ry, mouth_rx)
    img = np.where(mouth[None], lip[:, None, None], img)
    img = np.clip(img, 0.0, 1.0)

    pts = []
    pts.append(_arc(cx, cy, rx * 0.98, ry * 0.98, np.pi + 0.25, -0.25, 17))  # jaw 0-16
    for sx in (-1, 1):  # brows 17-26
        bx = cx + sx * eye_dx
        pts.append(_arc(bx, brow_y + 0.04 * ry, eye_rx * 1.3, 0.06 * ry, np.pi + 0.4, 2 * np.pi - 0.4, 5))
    bridge = np.stack([np.full(4, cx), np.linspace(nose_top, nose_bot - 0.06 * ry, 4)], axis=1)
    pts.append(bridge)  # 27-30
    pts.append(np.stack([cx + np.linspace(-nose_w, nose_w, 5), np.full(5, nose_bot)], axis=1))  # 31-35
    for sx in (-1, 1):  # eyes 36-47
        ex = cx + sx * eye_dx
        t = np.pi - np.arange(6) * np.pi / 3.0
        pts.append(np.stack([ex + eye_rx * np.cos(t), eye_y - eye_ry * np.sin(t)], axis=1))
    t = np.pi - np.arange(12) * np.pi / 6.0
    pts.append(np.stack([cx + mouth_rx * np.cos(t), mouth_y - mouth_ry * np.sin(t)], axis=1))  # 48-59
    t = np.pi - np.arange(8) * np.pi / 4.0
    pts.append(np.stack([cx + 0.6 * mouth_rx * np.cos(t), mouth_y - 0.5 * mouth_ry * np.sin(t)], axis=1))
    if n_landmarks == 81:
        pts.append(_arc(cx, cy - 0.1 * ry, rx * 0.9, ry * 0.85, np.pi + 0.5, 2 * np.pi - 0.5, 13))
    points = np.clip(np.concatenate(pts, axis=0), 0.0, s - 1.0)
    return img, LandmarkSet(points, size, size)
