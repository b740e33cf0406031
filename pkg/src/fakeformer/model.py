"""ViT backbone with a classification head and a local-attention heatmap head.

All forward functions accept a single ``(3, H, W)`` image or a ``(B, 3, H, W)``
batch; batched calls return batched outputs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import DimensionError, Tensor

HEAD_PREFIXES = ("head.", "l2att.")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    mlp_dim: int = 256
    heads: int = 4
    att_hidden: Optional[int] = None
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError("patch_size must divide height and width")
        if self.height != self.width:
            raise ConfigError("the heatmap head needs a square patch grid (height == width)")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.att_hidden is None:
            object.__setattr__(self, "att_hidden", self.dim // 2)

    @property
    def grid(self) -> int:
        return self.height // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


FAKEFORMER_S = ModelConfig(112, 112, 8, 12, 384, 1536, 6)
FAKEFORMER_B = ModelConfig(224, 224, 16, 12, 768, 3072, 12)
TINY = ModelConfig(64, 64, 8, 4, 64, 256, 4)
PRESETS = {"fakeformer-s": FAKEFORMER_S, "fakeformer-b": FAKEFORMER_B, "tiny": TINY}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, m, a = cfg.dim, cfg.mlp_dim, cfg.att_hidden
    shapes = {
        "patch_embed": (cfg.patch_dim, d),
        "pos_embed": (cfg.num_patches + 1, d),
        "cls_token": (d,),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes[b + "ln1.gamma"] = (d,)
        shapes[b + "ln1.beta"] = (d,)
        for n in ("q", "k", "v", "o"):
            shapes[b + f"attn.w{n}"] = (d, d)
            shapes[b + f"attn.b{n}"] = (d,)
        shapes[b + "ln2.gamma"] = (d,)
        shapes[b + "ln2.beta"] = (d,)
        shapes[b + "mlp.w1"] = (d, m)
        shapes[b + "mlp.b1"] = (m,)
        shapes[b + "mlp.w2"] = (m, d)
        shapes[b + "mlp.b2"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.w"] = (d, 1)
    shapes["head.b"] = (1,)
    shapes["l2att.conv3.w"] = (a, d, 3, 3)
    shapes["l2att.conv3.b"] = (a,)
    shapes["l2att.bn3.gamma"] = (a,)
    shapes["l2att.bn3.beta"] = (a,)
    shapes["l2att.conv1.w"] = (1, a, 1, 1)
    shapes["l2att.conv1.b"] = (1,)
    shapes["l2att.bn1.gamma"] = (1,)
    shapes["l2att.bn1.beta"] = (1,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    a = cfg.att_hidden
    return {
        "l2att.bn3.running_mean": (a,),
        "l2att.bn3.running_var": (a,),
        "l2att.bn1.running_mean": (1,),
        "l2att.bn1.running_var": (1,),
    }


def param_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


def flop_estimate(cfg: ModelConfig) -> int:
    """Forward FLOPs for one image, counting a multiply-add as 2."""
    n, d, m, a = cfg.num_patches + 1, cfg.dim, cfg.mlp_dim, cfg.att_hidden
    g = cfg.grid
    per_block = 2 * (4 * n * d * d + 2 * n * n * d + 2 * n * d * m)
    embed = 2 * cfg.num_patches * cfg.patch_dim * d
    head = 2 * d + 2 * g * g * (9 * d * a + a)
    return int(embed + cfg.depth * per_block + head)


def is_backbone(name: str) -> bool:
    return not name.startswith(HEAD_PREFIXES)


class ModelParams:
    """Named learnable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def backbone_names(self) -> list[str]:
        return [n for n in self.tensors if is_backbone(n)]

    def head_names(self) -> list[str]:
        return [n for n in self.tensors if not is_backbone(n)]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy(), t.requires_grad, n) for n, t in self.tensors.items()},
            {n: b.copy() for n, b in self.buffers.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        out = {n: t.data for n, t in self.tensors.items()}
        out.update(self.buffers)
        return out


_ZERO_INIT = {"beta", "b", "bq", "bk", "bv", "bo", "b1", "b2"}


def _trunc_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf in _ZERO_INIT:
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape)
        tensors[name] = Tensor(data, name=name)
    buffers = {}
    for name, shape in buffer_shapes(cfg).items():
        buffers[name] = np.ones(shape) if name.endswith("var") else np.zeros(shape)
    return ModelParams(cfg, tensors, buffers)


# forward pieces


def extract_patches(img: np.ndarray, p: int) -> np.ndarray:
    """Row-major patches, each flattened channel-major then row-major: ``(..., N, C*P*P)``."""
    *lead, c, h, w = img.shape
    if h % p or w % p:
        raise DimensionError(f"patch size {p} does not divide {h}x{w}")
    gh, gw = h // p, w // p
    x = img.reshape(*lead, c, gh, p, gw, p)
    nd = len(lead)
    axes = list(range(nd)) + [nd + 1, nd + 3, nd + 0, nd + 2, nd + 4]
    x = np.transpose(x, axes)  # (..., gh, gw, c, p, p)
    return x.reshape(*lead, gh * gw, c * p * p)


def _batched(img) -> tuple[np.ndarray, bool]:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise DimensionError(f"expected (3,H,W) or (B,3,H,W), got {arr.shape}")


def patch_embed(img, params: ModelParams) -> Tensor:
    cfg = params.config
    x, single = _batched(img)
    if x.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise DimensionError(f"image {x.shape[1:]} does not match config {cfg.height}x{cfg.width}")
    patches = extract_patches(x, cfg.patch_size)
    emb = T.matmul(patches, params["patch_embed"])
    cls = T.add(np.zeros((x.shape[0], 1, cfg.dim)), params["cls_token"])
    z = T.add(T.concat([cls, emb], axis=1), params["pos_embed"])
    return T.getitem(z, 0) if single else z


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def attention(z: Tensor, params: ModelParams, prefix: str, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention with output projection."""
    *lead, n, d = z.shape
    dh = d // heads

    def split(t):
        t = T.reshape(t, (*lead, n, heads, dh))
        nd = len(lead)
        return T.permute(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    q = split(_linear(z, params[prefix + "wq"], params[prefix + "bq"]))
    k = split(_linear(z, params[prefix + "wk"], params[prefix + "bk"]))
    v = split(_linear(z, params[prefix + "wv"], params[prefix + "bv"]))
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    o = T.matmul(weights, v)
    nd = len(lead)
    o = T.permute(o, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    o = T.reshape(o, (*lead, n, d))
    out = _linear(o, params[prefix + "wo"], params[prefix + "bo"])
    return (out, weights) if return_weights else out


def encoder_block(z: Tensor, params: ModelParams, index: int, return_weights: bool = False):
    cfg = params.config
    b = f"blocks.{index}."
    h = T.layer_norm(z, params[b + "ln1.gamma"], params[b + "ln1.beta"], 1e-6)
    att = attention(h, params, b + "attn.", cfg.heads, return_weights)
    if return_weights:
        att, weights = att
    z = T.add(att, z)
    h = T.layer_norm(z, params[b + "ln2.gamma"], params[b + "ln2.beta"], 1e-6)
    h = _linear(T.gelu(_linear(h, params[b + "mlp.w1"], params[b + "mlp.b1"])), params[b + "mlp.w2"], params[b + "mlp.b2"])
    z = T.add(h, z)
    return (z, weights) if return_weights else z


def final_norm(z: Tensor, params: ModelParams) -> Tensor:
    return T.layer_norm(z, params["norm.gamma"], params["norm.beta"], 1e-6)


def classify(z_final: Tensor, params: ModelParams) -> Tensor:
    """Final LN, class-token row, linear map to a scalar logit (per batch item)."""
    zn = final_norm(z_final, params)
    return _cls_head(zn, params)


def _cls_head(zn: Tensor, params: ModelParams) -> Tensor:
    # keep the row axis so an unbatched (N+1, D) input still meets matmul as 2-D
    row = T.getitem(zn, (Ellipsis, slice(0, 1), slice(None)))
    logit = _linear(row, params["head.w"], params["head.b"])
    return T.getitem(logit, (Ellipsis, 0, 0))


def l2att_forward(z_patches: Tensor, params: ModelParams, training: bool = False) -> Tensor:
    """``(..., N, D)`` patch embeddings -> ``(..., sqrt N, sqrt N)`` heatmap in (0, 1)."""
    *lead, n, d = z_patches.shape
    g = math.isqrt(n)
    if g * g != n:
        raise DimensionError(f"{n} patches do not form a square grid")
    single = not lead
    x = T.reshape(z_patches, (1, n, d)) if single else z_patches
    bsz = x.shape[0]
    x = T.reshape(T.permute(x, (0, 2, 1)), (bsz, d, g, g))
    buf = params.buffers
    x = T.conv2d(x, params["l2att.conv3.w"], params["l2att.conv3.b"])
    x = T.batch_norm(
        x, params["l2att.bn3.gamma"], params["l2att.bn3.beta"],
        buf["l2att.bn3.running_mean"], buf["l2att.bn3.running_var"], training,
    )
    x = T.relu(x)
    x = T.conv2d(x, params["l2att.conv1.w"], params["l2att.conv1.b"])
    x = T.batch_norm(
        x, params["l2att.bn1.gamma"], params["l2att.bn1.beta"],
        buf["l2att.bn1.running_mean"], buf["l2att.bn1.running_var"], training,
    )
    heat = T.sigmoid(T.reshape(x, (bsz, g, g)))
    return T.reshape(heat, (g, g)) if single else heat


@dataclass
class ModelOutput:
    logit: Tensor
    heatmap: Tensor

    @property
    def score(self) -> np.ndarray:
        x = self.logit.data
        return 1.0 / (1.0 + np.exp(-x))


def forward(img, params: ModelParams, training: bool = False) -> ModelOutput:
    x, single = _batched(img)
    z = patch_embed(x, params)
    for i in range(params.config.depth):
        z = encoder_block(z, params, i)
    zn = final_norm(z, params)
    logit = _cls_head(zn, params)
    heat = l2att_forward(T.getitem(zn, (slice(None), slice(1, None))), params, training)
    if single:
        return ModelOutput(T.getitem(logit, 0), T.getitem(heat, 0))
    return ModelOutput(logit, heat)
