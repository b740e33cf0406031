import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fakeformer import model as M
from fakeformer import weights as W
from fakeformer.model import FAKEFORMER_B, FAKEFORMER_S, TINY, ModelConfig
from fakeformer.numerics import tensor as T
from fakeformer.numerics.tensor import DimensionError, Tensor

SMALL = ModelConfig(height=16, width=16, patch_size=8, depth=1, dim=8, mlp_dim=16, heads=2)


def rand_params(cfg, seed=0, scale=0.3):
    params = M.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for t in params.tensors.values():
        t.data = t.data + rng.normal(0.0, scale, size=t.shape)
    return params


# configs


def test_paper_scale_shapes():
    assert FAKEFORMER_S.num_patches == 196 and FAKEFORMER_S.grid == 14
    assert M.param_shapes(FAKEFORMER_S)["pos_embed"] == (197, 384)
    assert abs(M.param_count(FAKEFORMER_S) - 22.77e6) / 22.77e6 <= 0.05
    assert FAKEFORMER_B.num_patches == 196


def test_config_validation():
    with pytest.raises(M.ConfigError):
        ModelConfig(height=30, width=30, patch_size=8)
    with pytest.raises(M.ConfigError):
        ModelConfig(dim=10, heads=4)
    with pytest.raises(M.ConfigError):
        ModelConfig.from_dict({"depthh": 2})
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY


# patch embedding


def test_zero_image_gives_zero_patch_rows():
    params = M.init_params(SMALL, 0)
    params["pos_embed"].data[:] = 0.0
    z = M.patch_embed(np.zeros((3, 16, 16)), params).data
    assert np.all(z[1:] == 0.0)
    assert np.array_equal(z[0], params["cls_token"].data)


def test_embedding_rows_for_paper_config():
    params = M.init_params(ModelConfig(112, 112, 8, 1, 16, 32, 2), 0)
    assert M.patch_embed(np.zeros((3, 112, 112)), params).shape == (197, 16)


def test_swapping_patches_swaps_rows():
    params = M.init_params(SMALL, 0)
    params["pos_embed"].data[:] = 0.0
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    swapped = img.copy()
    swapped[:, :8, :8], swapped[:, 8:, 8:] = img[:, 8:, 8:], img[:, :8, :8]
    a = M.patch_embed(img, params).data
    b = M.patch_embed(swapped, params).data
    assert np.array_equal(a[[0, 4, 2, 3, 1]], b)


def test_patch_order_is_row_major():
    img = np.arange(3 * 4 * 4, dtype=float).reshape(3, 4, 4)
    p = M.extract_patches(img, 2)
    assert p.shape == (4, 12)
    assert p[1, :4].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_wrong_image_size_rejected():
    with pytest.raises(DimensionError):
        M.patch_embed(np.zeros((3, 32, 32)), M.init_params(SMALL, 0))


# encoder


def test_zero_block_is_identity():
    params = M.init_params(SMALL, 0)
    for name, t in params.tensors.items():
        if name.startswith("blocks.0.") and not name.endswith("gamma"):
            t.data[:] = 0.0
    z = Tensor(np.random.default_rng(1).normal(size=(5, 8)))
    assert np.array_equal(M.encoder_block(z, params, 0).data, z.data)


def test_attention_rows_sum_to_one():
    params = rand_params(SMALL)
    z = Tensor(np.random.default_rng(2).normal(size=(5, 8)))
    _, w = M.encoder_block(z, params, 0, return_weights=True)
    assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


def test_single_head_attention_oracle():
    cfg = ModelConfig(height=8, width=8, patch_size=4, depth=1, dim=4, mlp_dim=8, heads=1)
    params = rand_params(cfg, 3)
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 4))
    p = {k: params[f"blocks.0.attn.{k}"].data for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    q, k, v = z @ p["wq"] + p["bq"], z @ p["wk"] + p["bk"], z @ p["wv"] + p["bv"]
    s = q @ k.T / 2.0
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    ref = (a @ v) @ p["wo"] + p["bo"]
    out = M.attention(Tensor(z), params, "blocks.0.attn.", 1).data
    assert np.allclose(out, ref, atol=1e-10, rtol=0)


# classification head


def test_zero_head_gives_half():
    params = M.init_params(SMALL, 0)
    params["head.w"].data[:] = 0.0
    out = M.forward(np.random.default_rng(5).uniform(size=(3, 16, 16)), params)
    assert out.logit.item() == 0.0 and out.score == 0.5


def test_one_hot_head_reads_normalised_feature():
    params = rand_params(SMALL)
    params["head.w"].data[:] = 0.0
    params["head.w"].data[3, 0] = 1.0
    params["head.b"].data[:] = 0.0
    z = Tensor(np.random.default_rng(6).normal(size=(5, 8)))
    zn = M.final_norm(z, params).data
    assert M.classify(z, params).item() == zn[0, 3]


def test_head_dot_product_oracle():
    params = rand_params(SMALL)
    z = Tensor(np.random.default_rng(7).normal(size=(5, 8)))
    row = z.data[0]
    mu, var = row.mean(), row.var()
    zn = (row - mu) / np.sqrt(var + 1e-6) * params["norm.gamma"].data + params["norm.beta"].data
    ref = float(zn @ params["head.w"].data[:, 0] + params["head.b"].data[0])
    assert M.classify(z, params).item() == pytest.approx(ref, abs=1e-12)


# heatmap head


def test_zero_conv_heatmap_is_half():
    params = M.init_params(SMALL, 0)
    for n in ("l2att.conv3.w", "l2att.conv1.w"):
        params[n].data[:] = 0.0
    heat = M.l2att_forward(Tensor(np.random.default_rng(8).normal(size=(4, 8))), params)
    assert heat.shape == (2, 2) and np.all(heat.data == 0.5)


def test_heatmap_shape_for_paper_grid():
    cfg = ModelConfig(112, 112, 8, 1, 16, 32, 2)
    heat = M.l2att_forward(Tensor(np.zeros((196, 16))), M.init_params(cfg, 0))
    assert heat.shape == (14, 14)


def test_l2att_matches_op_composition():
    params = rand_params(SMALL)
    zp = np.random.default_rng(9).normal(size=(4, 8))
    x = T.reshape(T.permute(Tensor(zp[None]), (0, 2, 1)), (1, 8, 2, 2))
    b = params.buffers
    x = T.conv2d(x, params["l2att.conv3.w"], params["l2att.conv3.b"])
    x = T.batch_norm(x, params["l2att.bn3.gamma"], params["l2att.bn3.beta"],
                     b["l2att.bn3.running_mean"].copy(), b["l2att.bn3.running_var"].copy(), False)
    x = T.conv2d(T.relu(x), params["l2att.conv1.w"], params["l2att.conv1.b"])
    x = T.batch_norm(x, params["l2att.bn1.gamma"], params["l2att.bn1.beta"],
                     b["l2att.bn1.running_mean"].copy(), b["l2att.bn1.running_var"].copy(), False)
    ref = T.sigmoid(T.reshape(x, (2, 2))).data
    assert np.array_equal(M.l2att_forward(Tensor(zp), params).data, ref)


def test_l2att_needs_square_grid():
    with pytest.raises(DimensionError):
        M.l2att_forward(Tensor(np.zeros((5, 8))), M.init_params(SMALL, 0))


def test_heatmap_shift_moves_conv_response():
    # before batch norm the conv response to a feature follows the feature
    params = rand_params(ModelConfig(32, 32, 8, 1, 8, 16, 2))
    w, bias = params["l2att.conv3.w"], params["l2att.conv3.b"]
    grid = np.zeros((1, 8, 4, 4))
    grid[0, :, 1, 1] = 1.0
    moved = np.roll(grid, 1, axis=3)
    a = T.conv2d(Tensor(grid), w, bias).data
    b = T.conv2d(Tensor(moved), w, bias).data
    assert np.allclose(a[..., :, 0:3], b[..., :, 1:4], atol=1e-12)


# full forward


def test_forward_deterministic_and_batched():
    params = rand_params(SMALL)
    imgs = np.random.default_rng(10).uniform(size=(3, 3, 16, 16))
    a, b = M.forward(imgs, params), M.forward(imgs, params)
    assert np.array_equal(a.logit.data, b.logit.data) and np.array_equal(a.heatmap.data, b.heatmap.data)
    one = M.forward(imgs[1], params)
    assert one.heatmap.shape == (2, 2)
    assert one.logit.item() == pytest.approx(a.logit.data[1], abs=1e-12)


def test_forward_ranges_over_seeds():
    cfg = ModelConfig(height=16, width=16, patch_size=4, depth=1, dim=8, mlp_dim=16, heads=2)
    for seed in range(100):
        params = rand_params(cfg, seed, scale=0.5)
        img = np.random.default_rng(seed).uniform(size=(3, 16, 16))
        out = M.forward(img, params)
        h = out.heatmap.data
        assert np.isfinite(out.logit.item()) and np.all((h > 0) & (h < 1))


def test_tiny_end_to_end_gradient():
    from fakeformer.verify import check_full_loss

    res = check_full_loss(seeds=(0, 1))
    assert res.passed, res.line()


# initialisation


def test_init_deterministic_and_gammas():
    a, b = M.init_params(SMALL, 3), M.init_params(SMALL, 3)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.tensors)
    for n, t in a.tensors.items():
        if n.endswith("gamma"):
            assert np.all(t.data == 1.0)
    assert not np.array_equal(a["patch_embed"].data, M.init_params(SMALL, 4)["patch_embed"].data)


def test_init_statistics_at_width_384():
    cfg = ModelConfig(112, 112, 8, 1, 384, 1536, 6)
    w = M.init_params(cfg, 0)["blocks.0.mlp.w1"].data
    assert abs(w.mean()) <= 0.01
    assert np.abs(w).max() <= 0.04
    assert w.std() == pytest.approx(0.02 * 0.88, rel=0.05)  # truncated at two sigma


def test_backbone_split():
    params = M.init_params(SMALL, 0)
    assert set(params.head_names()) == {n for n in params.tensors if n.startswith(("head.", "l2att."))}
    assert "patch_embed" in params.backbone_names()


# weights files


def test_weights_round_trip(tmp_path):
    params = rand_params(SMALL)
    path = tmp_path / "w.fkf"
    W.save_params(params, path)
    back = W.load_params(path)
    assert back.config == SMALL
    for n, t in params.tensors.items():
        assert np.array_equal(back[n].data, t.data.astype(np.float32))
    for n, b in params.buffers.items():
        assert np.array_equal(back.buffers[n], b.astype(np.float32))


def test_weights_bad_magic(tmp_path):
    path = tmp_path / "w.fkf"
    W.save_params(M.init_params(SMALL, 0), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(W.FormatError, match="magic"):
        W.load_params(path)


def test_weights_truncated(tmp_path):
    path = tmp_path / "w.fkf"
    W.save_params(M.init_params(SMALL, 0), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(W.FormatError, match="truncated"):
        W.load_params(path)


def test_weights_cross_config_names_tensor(tmp_path):
    path = tmp_path / "w.fkf"
    W.save_params(M.init_params(SMALL, 0), path)
    other = ModelConfig(height=16, width=16, patch_size=8, depth=1, dim=12, mlp_dim=16, heads=2)
    with pytest.raises(W.FormatError, match="patch_embed"):
        W.load_params(path, other)


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text("abcdef.", min_size=1, max_size=6), st.lists(st.integers(0, 3), max_size=3), max_size=4))
def test_encode_decode_property(shapes):
    rng = np.random.default_rng(0)
    state = {k: rng.normal(size=tuple(dims)) for k, dims in shapes.items()}
    back = W.decode(W.encode(state))
    assert list(back) == list(state)
    for k in state:
        assert np.array_equal(back[k], state[k].astype(np.float32))


def test_flop_estimate_grows_with_depth():
    deeper = ModelConfig(**{**TINY.to_dict(), "depth": 8})
    assert M.flop_estimate(deeper) > M.flop_estimate(TINY) > 0
    assert math.isqrt(TINY.num_patches) == TINY.grid
