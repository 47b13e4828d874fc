"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np


def grid_side(n_tokens: int) -> int:
    n = int(round(np.sqrt(n_tokens)))
    if n * n != n_tokens:
        raise ValueError(f"{n_tokens} tokens do not form a square grid")
    return n


def check_pairs(G, U=None, *, n: int | None = None, d: int | None = None):
    """Coerce ``(S, N, d)`` loading/solution stacks to finite float64.

    A single ``(N, d)`` sample is promoted to a batch of one.
    """
    arrays = [G] if U is None else [G, U]
    out = []
    for name, a in zip(("G", "U"), arrays):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 2:
            a = a[None]
        if a.ndim != 3:
            raise ValueError(f"{name} must be (samples, tokens, instances), got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contains non-finite values")
        out.append(a)
    if U is not None and out[0].shape != out[1].shape:
        raise ValueError(f"G {out[0].shape} and U {out[1].shape} differ in shape")
    side = grid_side(out[0].shape[1])
    if n is not None and side != n:
        raise ValueError(f"data lives on a {side}x{side} grid, model expects {n}x{n}")
    if d is not None and out[0].shape[2] != d:
        raise ValueError(f"model expects {d} instances per sample, got {out[0].shape[2]}")
    return out[0] if U is None else (out[0], out[1])
