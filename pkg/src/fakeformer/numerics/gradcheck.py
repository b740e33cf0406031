"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    tol: float
    worst: Optional[tuple] = None
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.0e}, {self.n_checked} coords)"
        )


def gradient_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    floor: float = 1e-6,
    rng: Optional[np.random.Generator] = None,
    name: str = "f",
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must read ``inputs`` by reference; they are perturbed in place and
    restored.  Tensors with more than ``max_coords`` entries are checked on a
    random sample of ``max_coords`` coordinates.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    max_rel = 0.0
    max_abs = 0.0
    worst = None
    n = 0
    failures = []
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        a_flat = analytic[ti].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            a = a_flat[c]
            err = abs(a - num)
            rel = err / max(abs(a), abs(num), floor)
            n += 1
            if not np.isfinite(rel):
                failures.append((ti, int(c), a, num))
                rel = np.inf
            if rel > max_rel:
                max_rel, worst = rel, (ti, int(c), float(a), float(num))
            max_abs = max(max_abs, err)
    for t in inputs:
        t.grad = None
    return GradCheckReport(name, float(max_rel), float(max_abs), n, tol, worst, failures)
