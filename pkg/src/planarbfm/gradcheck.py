"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Parameter, Tape, Tensor
from .errors import ContractError


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                      eps: float = 1e-4, max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of f against central differences.

    f must be a deterministic zero-argument callable returning a scalar Tensor
    built from the given params. Returns the max relative error over all
    checked entries. Run under float64 precision for trustworthy results.
    """
    if eps <= 0:
        raise ContractError("finite_diff_check requires eps > 0")
    with Tape() as tape:
        loss = f()
        grads = tape.backward(loss)
    base = loss.item()
    if float(f().item()) != base:
        raise ContractError("f is not deterministic: two evaluations at the same point differ")

    worst = 0.0
    for p in params:
        if p.name not in grads:
            raise ContractError(f"parameter {p.name} unreachable from the loss")
        g = grads[p.name]
        flat = p.value.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            picker = rng or np.random.default_rng(0)
            idxs = picker.choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        gflat = g.reshape(-1)
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            hi = f().item()
            flat[i] = old - eps
            lo = f().item()
            flat[i] = old
            numeric = (hi - lo) / (2.0 * eps)
            worst = max(worst, _rel_err(float(gflat[i]), numeric))
    return worst
