"""Gradient-check cases for every differentiable op.

Each case builds fresh random inputs from an rng and returns ``(f, inputs)``
where ``f()`` is a scalar.  Ops are looked up on the ``tensor`` module at call
time so a patched op is what gets checked.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape))


def _weighted(out, w):
    # random weighting keeps the upstream gradient non-uniform
    return T.sum_(T.mul(out, w))


def _case_add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(T.add(a, b), w)), [a, b]


def _case_sub(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 1)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(T.sub(a, b), w)), [a, b]


def _case_mul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 3, 4)
    w = rng.normal(size=(2, 3, 4))
    return (lambda: _weighted(T.mul(a, b), w)), [a, b]


def _case_div(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4, lo=0.5, hi=2.0)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(T.div(a, b), w)), [a, b]


def _case_scalar_ops(rng):
    a = _t(rng, 5)
    w = rng.normal(size=5)
    return (lambda: _weighted(T.neg(T.add(T.mul(a, 2.5), -0.75)), w)), [a]


def _case_power(rng):
    a = _t(rng, 6, lo=0.2, hi=1.5)
    w = rng.normal(size=6)
    return (lambda: _weighted(T.power(a, 2.0), w) + _weighted(T.power(a, 0.5), w)), [a]


def _case_exp_log(rng):
    a = _t(rng, 6, lo=0.2, hi=2.0)
    w = rng.normal(size=6)
    return (lambda: _weighted(T.log(a), w) + _weighted(T.exp(a), w)), [a]


def _case_clamp(rng):
    a = _t(rng, 8, lo=-2.0, hi=2.0)
    w = rng.normal(size=8)
    return (lambda: _weighted(T.clamp(a, -1.0, 1.0), w)), [a]


def _case_relu(rng):
    a = _t(rng, 10)
    w = rng.normal(size=10)
    return (lambda: _weighted(T.relu(a), w)), [a]


def _case_sigmoid(rng):
    a = _t(rng, 10, lo=-4, hi=4)
    w = rng.normal(size=10)
    return (lambda: _weighted(T.sigmoid(a), w)), [a]


def _case_softplus(rng):
    a = _t(rng, 10, lo=-4, hi=4)
    w = rng.normal(size=10)
    return (lambda: _weighted(T.softplus(a), w)), [a]


def _case_gelu(rng):
    a = _t(rng, 10, lo=-3, hi=3)
    w = rng.normal(size=10)
    return (lambda: _weighted(T.gelu(a), w)), [a]


def _case_softmax(rng):
    a = _t(rng, 3, 5, lo=-2, hi=2)
    w = rng.normal(size=(3, 5))
    return (lambda: _weighted(T.softmax(a, axis=-1), w)), [a]


def _case_matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return (lambda: _weighted(T.matmul(a, b), w)), [a, b]


def _case_batched_matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda: _weighted(T.matmul(a, b), w)), [a, b]


def _case_layer_norm(rng):
    x, g, b = _t(rng, 4, 8), _t(rng, 8, lo=0.5, hi=1.5), _t(rng, 8)
    w = rng.normal(size=(4, 8))
    return (lambda: _weighted(T.layer_norm(x, g, b, 1e-6), w)), [x, g, b]


def _case_batch_norm_train(rng):
    x, g, b = _t(rng, 2, 3, 3, 3), _t(rng, 3, lo=0.5, hi=1.5), _t(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    w = rng.normal(size=(2, 3, 3, 3))
    return (lambda: _weighted(T.batch_norm(x, g, b, rm, rv, True), w)), [x, g, b]


def _case_batch_norm_eval(rng):
    x, g, b = _t(rng, 3, 3, 3), _t(rng, 3, lo=0.5, hi=1.5), _t(rng, 3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    w = rng.normal(size=(3, 3, 3))
    return (lambda: _weighted(T.batch_norm(x, g, b, rm, rv, False), w)), [x, g, b]


def _case_conv3(rng):
    x, k, b = _t(rng, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    w = rng.normal(size=(3, 5, 5))
    return (lambda: _weighted(T.conv2d(x, k, b), w)), [x, k, b]


def _case_conv1(rng):
    x, k, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1), _t(rng, 2)
    w = rng.normal(size=(2, 2, 4, 4))
    return (lambda: _weighted(T.conv2d(x, k, b), w)), [x, k, b]


def _case_max_pool(rng):
    # distinct values avoid argmax ties under perturbation
    x = T.Tensor(rng.permutation(64).reshape(8, 8) / 64.0 + rng.uniform(0, 1e-3, (8, 8)))
    w = rng.normal(size=(2, 2))
    return (lambda: _weighted(T.max_pool_patches(x, 4), w)), [x]


def _case_reshape_permute(rng):
    x = _t(rng, 2, 3, 4)
    w = rng.normal(size=(4, 6))
    return (lambda: _weighted(T.reshape(T.permute(x, (2, 0, 1)), (4, 6)), w)), [x]


def _case_transpose(rng):
    x = _t(rng, 3, 4)
    w = rng.normal(size=(4, 3))
    return (lambda: _weighted(T.transpose(x), w)), [x]


def _case_concat(rng):
    a, b = _t(rng, 1, 4), _t(rng, 3, 4)
    w = rng.normal(size=(4, 4))
    return (lambda: _weighted(T.concat([a, b], axis=0), w)), [a, b]


def _case_getitem(rng):
    x = _t(rng, 5, 3)
    w = rng.normal(size=(4, 3))
    return (lambda: _weighted(T.getitem(x, (slice(1, None),)), w) + T.sum_(T.getitem(x, 0))), [x]


def _case_sum_mean(rng):
    x = _t(rng, 3, 4)
    w = rng.normal(size=3)
    return (lambda: _weighted(T.sum_(x, axis=1), w) + T.mean(x) + _weighted(T.mean(x, axis=1), w)), [x]


OP_CASES: dict[str, Callable] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "scalar_ops": _case_scalar_ops,
    "power": _case_power,
    "exp_log": _case_exp_log,
    "clamp": _case_clamp,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softplus": _case_softplus,
    "gelu": _case_gelu,
    "softmax": _case_softmax,
    "matmul": _case_matmul,
    "batched_matmul": _case_batched_matmul,
    "layer_norm": _case_layer_norm,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_eval": _case_batch_norm_eval,
    "conv2d_3x3": _case_conv3,
    "conv2d_1x1": _case_conv1,
    "max_pool_patches": _case_max_pool,
    "reshape_permute": _case_reshape_permute,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "getitem": _case_getitem,
    "sum_mean": _case_sum_mean,
}
