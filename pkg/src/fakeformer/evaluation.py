"""Detection metrics, SSIM quality stratification and perturbation robustness."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .synthesis import gaussian_blur

DEFAULT_SSIM_EDGES = (0.6, 0.8, 0.9, 0.925, 0.95, 0.97, 1.0)
PERTURBATIONS = ("saturation", "contrast", "block", "noise", "blur")


class MetricError(ValueError):
    pass


@dataclass
class ScoredSample:
    score: float
    label: int
    source_id: str = ""
    mask_ssim: Optional[float] = None


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be binary")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks (ties count one half)."""
    s, y = _split(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined without both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean precision at each positive in descending-score order; ties keep input order."""
    s, y = _split(scores, labels)
    if y.sum() == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.mean(tp[hits == 1] / ranks[hits == 1]))


def video_level_scores(scores, source_ids: Sequence[str], agg: str = "mean") -> dict[str, float]:
    """One score per source id, in first-appearance order."""
    if agg not in ("mean", "max"):
        raise MetricError(f"unknown aggregation {agg!r}")
    groups: dict[str, list] = {}
    for sc, sid in zip(np.asarray(scores, dtype=np.float64).ravel(), source_ids):
        groups.setdefault(sid, []).append(sc)
    fn = np.mean if agg == "mean" else np.max
    return {sid: float(fn(v)) for sid, v in groups.items()}


def video_level(scores, labels, source_ids: Sequence[str], agg: str = "mean"):
    """Aggregate frames to videos; a video is fake if any of its frames is."""
    vs = video_level_scores(scores, source_ids, agg)
    lab: dict[str, int] = {}
    for y, sid in zip(np.asarray(labels).ravel(), source_ids):
        lab[sid] = max(lab.get(sid, 0), int(y))
    ids = list(vs)
    return ids, np.array([vs[i] for i in ids]), np.array([lab[i] for i in ids])


# SSIM

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def luma(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise MetricError(f"ssim dims differ: {a.shape} vs {b.shape}")
    x = luma(a) if a.ndim == 3 else a
    y = luma(b) if b.ndim == 3 else b
    w = _window()

    def filt(z):
        return ndimage.correlate(z, w, mode="reflect")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_map(a, b).mean())


def mask_ssim(fake: np.ndarray, real: np.ndarray, mask: np.ndarray) -> float:
    sel = mask > 0.5
    if not sel.any():
        raise MetricError("mask selects no pixels")
    return float(ssim_map(fake, real)[sel].mean())


def stratify_by_ssim(scores, labels, mask_ssims, edges: Sequence[float] = DEFAULT_SSIM_EDGES) -> list[dict]:
    """Per-bin AUC of the fakes in each Mask-SSIM bin against all reals.

    A leading ``[0, edges[0])`` bin is added when the edges start above 0 so
    every fake lands in exactly one bin.  Bins with fewer than 2 fakes get
    ``auc = None``.
    """
    s, y = _split(scores, labels)
    q = np.asarray(mask_ssims, dtype=np.float64).ravel()
    edges = list(edges)
    if edges[0] > 0:
        edges = [0.0] + edges
    reals = s[y == 0]
    rows = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        sel = (y == 1) & (q >= lo) & ((q <= hi) if last else (q < hi))
        fakes = s[sel]
        value = None
        if len(fakes) >= 2 and len(reals) >= 1:
            value = auc(np.concatenate([fakes, reals]), np.r_[np.ones(len(fakes)), np.zeros(len(reals))])
        rows.append({"lo": lo, "hi": hi, "auc": value, "count": int(len(fakes))})
    return rows


# perturbations


def perturb(img: np.ndarray, kind: str, severity: int, rng) -> np.ndarray:
    """Unseen-perturbation suite; severity 0 is the identity."""
    if kind not in PERTURBATIONS:
        raise MetricError(f"unknown perturbation {kind!r}")
    if not 0 <= severity <= 5:
        raise MetricError("severity must lie in 0..5")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(int(rng))
    if severity == 0:
        return img.copy()
    s = int(severity)
    if kind in ("saturation", "contrast"):
        sign = 1.0 if gen.random() < 0.5 else -1.0
        factor = 1.0 + sign * 0.1 * s
        if kind == "saturation":
            ref = luma(img)[None]
        else:
            ref = img.mean()
        out = ref + factor * (img - ref)
    elif kind == "block":
        h, w = img.shape[-2:]
        side = max(1, h // 8)
        out = img.copy()
        for _ in range(s):
            r = int(gen.integers(0, h - side + 1))
            c = int(gen.integers(0, w - side + 1))
            out[:, r : r + side, c : c + side] = 0.5
    elif kind == "noise":
        out = img + gen.normal(0.0, 0.01 * s, size=img.shape)
    else:
        out = gaussian_blur(img, 2 * s + 1)
    return np.clip(out, 0.0, 1.0)


# reports


@dataclass
class EvalReport:
    auc: float
    ap: float
    n_pos: int
    n_neg: int
    level: str = "frame"
    bins: Optional[list] = None
    perturbations: Optional[list] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self) -> list[dict]:
        rows = [{"section": "overall", "key": self.level, "auc": self.auc, "ap": self.ap, "count": self.n_pos + self.n_neg}]
        for b in self.bins or []:
            rows.append({"section": "mask_ssim", "key": f"{b['lo']}-{b['hi']}", "auc": b["auc"], "ap": "", "count": b["count"]})
        for p in self.perturbations or []:
            rows.append({"section": "perturb", "key": f"{p['kind']}:{p['severity']}", "auc": p["auc"], "ap": p["ap"], "count": p["count"]})
        return rows


def report_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["section", "key", "auc", "ap", "count"], lineterminator="\n")
    writer.writeheader()
    for r in reports:
        for row in r.csv_rows():
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def build_report(scores, labels, level: str = "frame") -> EvalReport:
    s, y = _split(scores, labels)
    return EvalReport(auc(s, y), average_precision(s, y), int(y.sum()), int(len(y) - y.sum()), level)
