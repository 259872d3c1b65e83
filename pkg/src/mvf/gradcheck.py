"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mvf.tensor import Tensor


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    passed: bool
    n_checked: int


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, tolerance: float = 1e-4,
               max_entries: int | None = None, rng_seed: int = 0) -> GradCheckReport:
    """Compare ``d f / d x`` from backward() against central differences.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``; entries where both are below 1e-10
    count as exact. ``max_entries`` spot-checks a seeded random subset.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    t = Tensor(base.copy(), requires_grad=True)
    out = f(t)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(base) if t.grad is None else t.grad.reshape(base.shape)

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort(np.random.default_rng(rng_seed).choice(flat.size, max_entries, replace=False))
    numeric = np.zeros(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = old - step
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = old
        numeric[n] = (fp - fm) / (2 * step)
    a = analytic.reshape(-1)[idx]
    abs_err = np.abs(a - numeric)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    rel = np.where((np.abs(a) < 1e-10) & (np.abs(numeric) < 1e-10), 0.0, abs_err / scale)
    max_rel = float(rel.max()) if len(rel) else 0.0
    return GradCheckReport(max_rel, float(abs_err.max()) if len(abs_err) else 0.0, tolerance,
                           max_rel < tolerance, len(idx))
