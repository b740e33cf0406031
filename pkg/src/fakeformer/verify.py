"""Oracle suite behind ``fakeformer verify``.

Every check compares the library against an independent, deliberately naive
implementation (finite differences, exhaustive scans, pair counting) and
reports the largest discrepancy it saw.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import evaluation as ev
from . import synthesis as syn
from . import vulnerability as vul
from .model import ModelConfig, forward, init_params
from .numerics import catalog
from .numerics.gradcheck import gradient_check
from .numerics.tensor import Tensor
from .training import TrainConfig, total_loss

GRAD_TOL = 1e-4
LOSS_TOL = 1e-3
SEEDS = (0, 1, 2, 3, 4)
TINY_VERIFY = ModelConfig(height=16, width=16, patch_size=8, depth=1, dim=8, mlp_dim=16, heads=2, seed=0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_err: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{tag}] {self.name}: max err {self.max_err:.3e}{extra}"


# gradients


def check_op(name: str, seeds=SEEDS, tol: float = GRAD_TOL) -> CheckResult:
    worst, n = 0.0, 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        f, inputs = catalog.OP_CASES[name](rng)
        rep = gradient_check(f, inputs, tol=tol, rng=rng, name=name)
        n += rep.n_checked
        if not np.isfinite(rep.max_rel_err):
            return CheckResult(f"grad:{name}", False, float("inf"), f"seed {seed} non-finite")
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            return CheckResult(f"grad:{name}", False, worst, f"seed {seed}, {n} coords")
    return CheckResult(f"grad:{name}", True, worst, f"{n} coords, {len(seeds)} seeds")


def check_full_loss(seeds=SEEDS, tol: float = LOSS_TOL) -> CheckResult:
    """Combined loss of a tiny model against finite differences, all parameters."""
    worst, n = 0.0, 0
    cfg = TrainConfig()
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        params = init_params(TINY_VERIFY, seed)
        # move off the init so every branch has a nontrivial gradient
        for t in params.tensors.values():
            t.data = t.data + rng.normal(0.0, 0.05, size=t.shape)
        images = rng.uniform(0.0, 1.0, size=(2, 3, 16, 16))
        labels = np.array([0.0, 1.0])
        g = TINY_VERIFY.grid
        targets = np.zeros((2, g, g))
        targets[1] = vul.gaussian_map((int(rng.integers(g)), int(rng.integers(g))), g)
        buffers = {k: v.copy() for k, v in params.buffers.items()}

        def f():
            # BN buffers move on every training-mode call; reset them so each
            # evaluation sees the same state
            for k, v in buffers.items():
                params.buffers[k][...] = v
            out = forward(images, params, training=True)
            return total_loss(out.logit, labels, out.heatmap, targets, cfg)[0]

        inputs = list(params.tensors.values())
        rep = gradient_check(f, inputs, tol=tol, rng=rng, max_coords=16, name="full_loss")
        n += rep.n_checked
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            return CheckResult("grad:full_loss", False, worst, f"seed {seed}, worst {rep.worst}")
    return CheckResult("grad:full_loss", True, worst, f"{n} coords, {len(seeds)} seeds")


# vulnerable patches and heatmaps


def oracle_patches(bmap: np.ndarray, p: int, mode: str) -> set:
    g = bmap.shape[0] // p
    vals = {}
    for r in range(g):
        for c in range(g):
            cells = [bmap[r * p + i, c * p + j] for i in range(p) for j in range(p)]
            vals[(c, r)] = max(cells) if mode == "max" else sum(cells) / len(cells)
    top = max(vals.values())
    if top <= 0:
        return set()
    return {k for k, v in vals.items() if v >= top - vul.TIE_TOL}


def random_bmap(rng: np.random.Generator, side: int = 32, p: int = 8) -> np.ndarray:
    """Random boundary maps, a third of them with deliberately tied patches."""
    kind = rng.integers(3)
    b = rng.uniform(0.0, 1.0, size=(side, side))
    if kind == 1:
        b = np.round(b * 4) / 4  # coarse levels: many ties under max
    elif kind == 2:
        g = side // p
        block = rng.uniform(0.0, 1.0, size=(p, p))
        for r, c in rng.integers(0, g, size=(rng.integers(2, 5), 2)):
            b[r * p : (r + 1) * p, c * p : (c + 1) * p] = block
        b *= 0.999
        for r, c in rng.integers(0, g, size=(2, 2)):
            b[r * p : (r + 1) * p, c * p : (c + 1) * p] = block
    return b


def check_patch_oracle(n: int = 500, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        b = random_bmap(rng)
        for mode in ("max", "mean"):
            if vul.vulnerable_patches(b, 8, mode) != oracle_patches(b, 8, mode):
                mismatches += 1
    return CheckResult("patch_oracle", mismatches == 0, float(mismatches), f"{2 * n} maps, mismatches counted")


def check_heatmap_law(n: int = 500, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(n):
        img, lms = syn.gen_toy_face(int(rng.integers(2**31)), size=64)
        fake = syn.make_self_blended(img, lms, rng)
        s = vul.ground_truth_heatmap(fake.boundary, 8)
        pts = vul.vulnerable_patches(fake.boundary, 8)
        arg = {(int(c), int(r)) for r, c in zip(*np.nonzero(s == s.max()))}
        scaled = vul.ground_truth_heatmap(fake.boundary * 3.7, 8)
        if s.max() != 1.0 or arg != pts or not np.array_equal(s, scaled):
            bad += 1
    real = vul.ground_truth_heatmap(None, 8, side=8)
    if np.any(real != 0):
        bad += 1
    return CheckResult("heatmap_law", bad == 0, float(bad), f"{n} fakes, violations counted")


# metrics


def oracle_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def check_auc_oracle(n: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=m)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 6, size=m) / 5.0 if rng.random() < 0.5 else rng.normal(size=m)
        worst = max(worst, abs(ev.auc(scores, labels) - oracle_auc(scores, labels)))
    return CheckResult("auc_oracle", worst == 0.0, worst, f"{n} instances")


def check_ap_cases() -> CheckResult:
    errs = [
        abs(ev.average_precision([0.9, 0.8, 0.2], [1, 0, 1]) - 5 / 6),
        abs(ev.average_precision([0.9, 0.8, 0.7], [1, 1, 1]) - 1.0),
    ]
    for n in (2, 5, 10, 50):
        scores = np.linspace(1.0, 0.0, n)
        labels = np.zeros(n, dtype=int)
        labels[-1] = 1
        errs.append(abs(ev.average_precision(scores, labels) - 1.0 / n))
    worst = max(errs)
    return CheckResult("ap_cases", worst < 1e-12, worst)


def check_ssim_identity(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        x = rng.uniform(0.0, 1.0, size=(3, 32, 32))
        worst = max(worst, abs(ev.ssim(x, x) - 1.0))
    return CheckResult("ssim_identity", worst <= 1e-12, worst)


# blending


def check_blending(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(20):
        fg = rng.uniform(size=(3, 16, 16))
        bg = rng.uniform(size=(3, 16, 16))
        ok &= np.array_equal(syn.blend(fg, bg, np.ones((16, 16))), fg)
        ok &= np.array_equal(syn.blend(fg, bg, np.zeros((16, 16))), bg)
        m = rng.uniform(size=(16, 16))
        worst = max(worst, float(np.abs(syn.blending_boundary(m) - syn.blending_boundary(1.0 - m)).max()))
    half = syn.blending_boundary(np.full((4, 4), 0.5))
    ok &= bool(np.all(half == 1.0))
    return CheckResult("blending_identities", bool(ok) and worst <= 1e-12, worst)


def all_checks() -> list[tuple[str, Callable[[], CheckResult]]]:
    checks = [(f"grad:{name}", (lambda n=name: check_op(n))) for name in catalog.OP_CASES]
    checks += [
        ("grad:full_loss", check_full_loss),
        ("patch_oracle", check_patch_oracle),
        ("heatmap_law", check_heatmap_law),
        ("auc_oracle", check_auc_oracle),
        ("ap_cases", check_ap_cases),
        ("ssim_identity", check_ssim_identity),
        ("blending_identities", check_blending),
    ]
    return checks


def run_suite(emit: Optional[Callable[[str], None]] = print) -> tuple[bool, list[CheckResult]]:
    results = []
    t0 = time.perf_counter()
    for name, fn in all_checks():
        try:
            res = fn()
        except Exception as exc:  # a crashing check is a failed check
            res = CheckResult(name, False, float("inf"), f"raised {type(exc).__name__}: {exc}")
        results.append(res)
        if emit:
            emit(res.line())
    ok = all(r.passed for r in results)
    if emit:
        failed = [r.name for r in results if not r.passed]
        emit(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
        if failed:
            emit("failed: " + ", ".join(failed))
    return ok, results
