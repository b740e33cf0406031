"""Training objective, optimiser, schedule, augmentation and the epoch loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from . import synthesis as syn
from .model import ModelConfig, ModelParams, forward, init_params, is_backbone
from .numerics import tensor as T
from .numerics.tensor import DimensionError, Tape, Tensor
from .vulnerability import ground_truth_heatmap

log = logging.getLogger(__name__)

HEATMAP_CLAMP = 1e-6


class TrainConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    p_color: float = 0.3
    p_crop: float = 0.2
    p_scale: float = 0.2
    p_flip: float = 0.5
    p_noise: float = 0.1
    p_blur: float = 0.1
    p_jpeg: float = 0.1
    color: float = 0.1
    min_crop_area: float = 0.9
    scale: float = 0.1
    noise_sigma: float = 0.02
    blur_kernels: tuple = (3, 5)
    jpeg_quality: tuple = (60, 95)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_color=0, p_crop=0, p_scale=0, p_flip=0, p_noise=0, p_blur=0, p_jpeg=0)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 5e-5
    weight_decay: float = 1e-4
    lam: float = 10.0
    label_smoothing: float = 0.1
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    freeze_epochs: int = 2
    frames_per_video: int = 1
    synthesis: str = "SBI"
    seed: int = 0
    patch_mode: str = "max"
    sigma: float = 1.0
    checkpoint_every: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            for k in ("blur_kernels", "jpeg_quality"):
                if k in aug:
                    aug[k] = tuple(aug[k])
            known = {f.name for f in fields(AugmentConfig)}
            if set(aug) - known:
                raise TrainConfigError(f"unknown augment keys: {sorted(set(aug) - known)}")
            self.augment = AugmentConfig(**aug)
        if self.lam < 0:
            raise TrainConfigError("lam must be >= 0")
        if not 0 <= self.label_smoothing < 0.5:
            raise TrainConfigError("label_smoothing must lie in [0, 0.5)")
        if self.frames_per_video < 1:
            raise TrainConfigError("frames_per_video must be >= 1")
        if self.epochs < 1 or not 0 <= self.freeze_epochs < self.epochs:
            raise TrainConfigError("need epochs >= 1 and 0 <= freeze_epochs < epochs")
        if self.synthesis not in ("SBI", "BI"):
            raise TrainConfigError("synthesis must be 'SBI' or 'BI'")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Recipe for the 64 px toy corpus on one core.

        At 64 px the stock augmentations wash out the blend seam, and the
        default lr with batch 32 takes only 10 steps per epoch on 320 samples,
        so the toy runs use small batches, a larger lr and no augmentation.
        """
        base = dict(batch_size=2, base_lr=5e-4, augment=AugmentConfig.disabled())
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"]["blur_kernels"] = list(d["augment"]["blur_kernels"])
        d["augment"]["jpeg_quality"] = list(d["augment"]["jpeg_quality"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# losses


def cls_loss(logit, label, eps: float = 0.1) -> Tensor:
    """Label-smoothed BCE on logits, averaged over the batch."""
    logit = T.as_tensor(logit)
    y = np.asarray(label, dtype=np.float64)
    y_s = y * (1.0 - eps) + eps / 2.0
    per = T.sub(T.softplus(logit), T.mul(logit, y_s))
    return T.mean(per)


def att_loss(pred, target, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced pixelwise focal loss, normalised per heatmap by its positive count.

    ``pred`` and ``target`` are ``(g, g)`` or ``(B, g, g)``; batches are averaged.
    """
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    p = T.clamp(pred, HEATMAP_CLAMP, 1.0 - HEATMAP_CLAMP)
    pos = (target == 1.0).astype(np.float64)
    neg_w = (1.0 - pos) * (1.0 - target) ** beta
    one_minus = T.sub(1.0, p)
    pos_term = T.mul(T.mul(T.power(one_minus, alpha), T.log(p)), pos)
    neg_term = T.mul(T.mul(T.power(p, alpha), T.log(one_minus)), neg_w)
    per_pixel = T.neg(T.add(pos_term, neg_term))
    per_map = T.sum_(per_pixel, axis=(-2, -1))
    npos = np.maximum(pos.sum(axis=(-2, -1)), 1.0)
    return T.mean(T.div(per_map, npos))


def total_loss(logit, label, pred, target, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    lc = cls_loss(logit, label, cfg.label_smoothing)
    la = att_loss(pred, target, cfg.focal_alpha, cfg.focal_beta)
    if cfg.lam == 0:
        return lc, lc, la
    return T.add(lc, T.mul(la, cfg.lam)), lc, la


# optimiser and schedule


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict,
    grads: dict,
    state: OptimizerState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    frozen: Sequence[str] = (),
) -> None:
    """In-place AdamW update with decoupled weight decay.

    ``params`` maps names to Tensors, ``grads`` names to arrays.  Frozen names
    are skipped outright; bias correction uses each parameter's own step count.
    """
    frozen = set(frozen)
    state.step += 1
    for name, t in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        if g.shape != t.shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param {t.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        k = state.steps.get(name, 0) + 1
        state.steps[name] = k
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**k)
        v_hat = v / (1.0 - beta2**k)
        if wd:
            t.data *= 1.0 - lr * wd
        t.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Constant for the first quarter of steps, then linear decay to 0 at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < total_steps / 4:
        return base_lr
    start = math.ceil(total_steps / 4)
    last = total_steps - 1
    if last <= start:
        return base_lr if step < last else 0.0
    return base_lr * (last - step) / (last - start)


# augmentation

_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
_JPEG_CHROMA = np.full((8, 8), 99.0)
_JPEG_CHROMA[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]
_RGB2YCC = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def jpeg_like(img: np.ndarray, quality: int) -> np.ndarray:
    """Approximate JPEG by 8x8 block DCT quantisation in YCbCr."""
    quality = int(np.clip(quality, 1, 100))
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    c, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    ycc = np.einsum("ij,jhw->ihw", _RGB2YCC, img * 255.0)
    ycc[0] -= 128.0
    ycc = np.pad(ycc, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = ycc.shape[1:]
    out = np.empty_like(ycc)
    for ch in range(3):
        table = _JPEG_LUMA if ch == 0 else _JPEG_CHROMA
        q = np.maximum(np.floor((table * scale + 50.0) / 100.0), 1.0)
        blocks = ycc[ch].reshape(hh // 8, 8, ww // 8, 8).swapaxes(1, 2)
        coef = dctn(blocks, axes=(-2, -1), norm="ortho")
        coef = np.round(coef / q) * q
        rec = idctn(coef, axes=(-2, -1), norm="ortho")
        out[ch] = rec.swapaxes(1, 2).reshape(hh, ww)
    out[0] += 128.0
    rgb = np.einsum("ij,jhw->ihw", _YCC2RGB, out[:, :h, :w]) / 255.0
    return np.clip(rgb, 0.0, 1.0)


def crop_resize(img: np.ndarray, top: float, left: float, side_h: float, side_w: float) -> np.ndarray:
    """Bilinear resample of the window ``[top, top+side_h) x [left, left+side_w)`` to full size."""
    c, h, w = img.shape
    rows = top + (np.arange(h) + 0.5) * side_h / h - 0.5
    cols = left + (np.arange(w) + 0.5) * side_w / w - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(ch, [rr, cc], order=1, mode="nearest") for ch in img])


@dataclass
class TrainSample:
    image: np.ndarray
    label: int
    target: np.ndarray
    source_id: str = ""


def augment(sample: TrainSample, rng: np.random.Generator, cfg: AugmentConfig) -> TrainSample:
    """Apply each augmentation independently with its configured probability.

    Only the horizontal flip moves the heatmap target.
    """
    img = sample.image
    target = sample.target
    c, h, w = img.shape
    if rng.random() < cfg.p_color:
        b, ct, hu = rng.uniform(-1, 1, size=3) * cfg.color
        img = syn.adjust_color(img, b, ct, hu)
    if rng.random() < cfg.p_crop:
        area = rng.uniform(cfg.min_crop_area, 1.0)
        side_h, side_w = h * math.sqrt(area), w * math.sqrt(area)
        top = rng.uniform(0, h - side_h)
        left = rng.uniform(0, w - side_w)
        img = crop_resize(img, top, left, side_h, side_w)
    if rng.random() < cfg.p_scale:
        img = syn.shift_resize(img, 0.0, 0.0, 1.0 + rng.uniform(-1, 1) * cfg.scale)
    if rng.random() < cfg.p_flip:
        img = img[:, :, ::-1].copy()
        target = target[:, ::-1].copy()
    if rng.random() < cfg.p_noise:
        img = np.clip(img + rng.normal(0.0, rng.uniform(0, cfg.noise_sigma), size=img.shape), 0.0, 1.0)
    if rng.random() < cfg.p_blur:
        img = syn.gaussian_blur(img, int(rng.choice(cfg.blur_kernels)))
    if rng.random() < cfg.p_jpeg:
        img = jpeg_like(img, int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1)))
    return TrainSample(img, sample.label, target, sample.source_id)


# data


@dataclass
class CorpusItem:
    """One video (or still): a source id and its frames as ``(image, landmarks)``."""

    source_id: str
    frames: list


def make_toy_corpus(n: int, size: int = 64, seed: int = 0, n_landmarks: int = 68) -> list[CorpusItem]:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    items = []
    for i, s in enumerate(seeds):
        img, lms = syn.gen_toy_face(int(s), size, n_landmarks)
        items.append(CorpusItem(f"toy{i:05d}", [(img, lms)]))
    return items


def _child_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]


def make_fake(
    item: CorpusItem,
    frame: tuple,
    corpus: Sequence[CorpusItem],
    rng: np.random.Generator,
    mode: str,
    synth: Optional[syn.SynthParams] = None,
) -> syn.PseudoFake:
    img, lms = frame
    if mode == "SBI" or len(corpus) < 2:
        return syn.make_self_blended(img, lms, rng, synth)
    others = [c for c in corpus if c.source_id != item.source_id] or list(corpus)
    donor = others[int(rng.integers(len(others)))]
    fg, fg_lms = donor.frames[int(rng.integers(len(donor.frames)))]
    return syn.make_cross_blended(fg, fg_lms, img, lms, rng, synth)


def build_batch(
    corpus: Sequence[CorpusItem],
    rng: np.random.Generator,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    synth: Optional[syn.SynthParams] = None,
    augment_samples: bool = True,
) -> list[TrainSample]:
    """One real and one pseudo-fake per selected frame, ``m`` frames per item."""
    if not corpus:
        raise ValueError("empty corpus")
    p = model_cfg.patch_size
    side = model_cfg.grid
    samples = []
    for item, r in zip(corpus, _child_rngs(rng, len(corpus))):
        k = min(cfg.frames_per_video, len(item.frames))
        picks = r.choice(len(item.frames), size=k, replace=False)
        for fi in sorted(int(i) for i in picks):
            frame = item.frames[fi]
            fake = make_fake(item, frame, corpus, r, cfg.synthesis, synth)
            real = TrainSample(frame[0], 0, ground_truth_heatmap(None, p, side=side), item.source_id)
            tgt = ground_truth_heatmap(fake.boundary, p, cfg.patch_mode, cfg.sigma)
            fk = TrainSample(fake.image, 1, tgt, item.source_id)
            if augment_samples:
                real = augment(real, r, cfg.augment)
                fk = augment(fk, r, cfg.augment)
            samples.extend([real, fk])
    return samples


def predict_scores(params: ModelParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(images[i : i + batch_size], params, training=False).score)
    return np.concatenate(out) if out else np.zeros(0)


# loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    cls_loss: float
    att_loss: float
    total_loss: float
    val_auc: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def train_step(
    params: ModelParams,
    batch: Sequence[TrainSample],
    state: OptimizerState,
    cfg: TrainConfig,
    lr: float,
    frozen: Sequence[str] = (),
) -> tuple[float, float, float]:
    frozen = set(frozen)
    for name, t in params.tensors.items():
        t.requires_grad = name not in frozen
        t.grad = None
    images = np.stack([s.image for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.float64)
    targets = np.stack([s.target for s in batch])
    with Tape() as tape:
        out = forward(images, params, training=True)
        loss, lc, la = total_loss(out.logit, labels, out.heatmap, targets, cfg)
    tape.backward(loss)
    grads = {n: t.grad for n, t in params.tensors.items() if t.grad is not None}
    adamw_step(params.tensors, grads, state, lr, cfg.weight_decay, frozen=frozen)
    for t in params.tensors.values():
        t.grad = None
        t.requires_grad = False
    return loss.item(), lc.item(), la.item()


def train(
    corpus: Sequence[CorpusItem],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    val_corpus: Optional[Sequence[CorpusItem]] = None,
    params: Optional[ModelParams] = None,
    synth: Optional[syn.SynthParams] = None,
    on_epoch: Optional[Callable[[EpochRecord, ModelParams], None]] = None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Train on reals plus on-the-fly pseudo-fakes; deterministic in ``cfg.seed``."""
    from .evaluation import auc

    params = params if params is not None else init_params(model_cfg, cfg.seed)
    root = np.random.SeedSequence(cfg.seed)
    data_seq, val_seq, shuffle_seq = root.spawn(3)

    n_samples = 2 * sum(min(cfg.frames_per_video, len(it.frames)) for it in corpus)
    steps_per_epoch = math.ceil(n_samples / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch

    val_images = val_labels = None
    if val_corpus:
        vs = build_batch(val_corpus, np.random.default_rng(val_seq), cfg, model_cfg, synth, augment_samples=False)
        val_images = np.stack([s.image for s in vs])
        val_labels = np.array([s.label for s in vs])

    backbone = [n for n in params.tensors if is_backbone(n)]
    state = OptimizerState()
    history = []
    step = 0
    data_rng = np.random.default_rng(data_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    for epoch in range(cfg.epochs):
        frozen = backbone if epoch < cfg.freeze_epochs else []
        samples = build_batch(corpus, data_rng, cfg, model_cfg, synth)
        order = shuffle_rng.permutation(len(samples))
        sums = np.zeros(3)
        lr = cfg.base_lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            lr = lr_at(step, total, cfg.base_lr)
            lt, lc, la = train_step(params, [samples[i] for i in idx], state, cfg, lr, frozen)
            sums += np.array([lt, lc, la]) * len(idx)
            step += 1
        sums /= len(samples)
        val_auc = None
        if val_images is not None:
            val_auc = auc(predict_scores(params, val_images), val_labels)
        rec = EpochRecord(epoch, lr, float(sums[1]), float(sums[2]), float(sums[0]), val_auc)
        history.append(rec)
        log.info(
            "epoch %d lr %.2e cls %.4f att %.4f total %.4f val_auc %s",
            epoch, lr, rec.cls_loss, rec.att_loss, rec.total_loss,
            "n/a" if val_auc is None else f"{val_auc:.4f}",
        )
        if on_epoch is not None:
            on_epoch(rec, params)
    return params, history
