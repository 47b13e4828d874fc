"""Per-epoch time and peak tensor memory of the Fourier and dense variants."""
from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .model import ModelConfig, init_params
from .randfield import split_rng
from .trainer import TrainConfig, fit

__all__ = ["bench_epoch", "run_bench", "dense_weight_bytes", "BENCH_COLUMNS"]

BENCH_COLUMNS = ["N", "variant", "time_s", "peak_bytes", "status"]
OVER_BUDGET = "exceeds memory budget"


def dense_weight_bytes(cfg: ModelConfig) -> int:
    """Bytes held by the ``2N x 2N`` projections of the dense variant."""
    return cfg.layers * (2 * cfg.n_tokens) ** 2 * 8


def bench_epoch(cfg: ModelConfig, n_samples: int = 8, batch_size: int = 4,
                seed: int = 0, repeats: int = 1) -> dict:
    """Time one training epoch on random inputs; best of ``repeats``."""
    rng = split_rng(seed, 5, cfg.n)
    G = rng.standard_normal((n_samples, cfg.n_tokens, cfg.d))
    U = rng.standard_normal((n_samples, cfg.n_tokens, cfg.d))
    tcfg = TrainConfig(epochs=1, batch_size=batch_size, seed=seed, lr_decay_every=0)
    best_t, peak = float("inf"), 0
    with T.single_threaded():
        for _ in range(repeats):
            params = init_params(cfg, split_rng(seed, 6))
            T.reset_peak()
            t0 = time.perf_counter()
            report, _ = fit(params, cfg, G, U, tcfg)
            best_t = min(best_t, time.perf_counter() - t0)
            peak = max(peak, max(report.peak_bytes))
            del params
    return {"time_s": best_t, "peak_bytes": int(peak)}


def run_bench(token_counts, *, d: int = 30, d_k: int = 20, modes=(5, 5), layers: int = 2,
              variants=("nips", "nao_wp_quadratic"), n_samples: int = 8, batch_size: int = 4,
              memory_cap_bytes: int = 2 * 1024 ** 3, repeats: int = 1, seed: int = 0,
              log=None) -> list[dict]:
    """One row per (token count, variant).

    A dense variant whose projection weights alone would exceed
    ``memory_cap_bytes`` is not run; its row carries a marker instead.
    """
    rows = []
    for N in token_counts:
        n = int(round(np.sqrt(N)))
        if n * n != N:
            raise ValueError(f"{N} tokens do not form a square grid")
        for variant in variants:
            cfg = ModelConfig(n=n, d=d, d_k=d_k, layers=layers, modes=tuple(modes), variant=variant)
            if variant != "nips" and dense_weight_bytes(cfg) > memory_cap_bytes:
                row = {"N": N, "variant": variant, "time_s": float("nan"),
                       "peak_bytes": 0, "status": OVER_BUDGET}
            else:
                row = {"N": N, "variant": variant, "status": "ok",
                       **bench_epoch(cfg, n_samples, batch_size, seed, repeats)}
            rows.append(row)
            if log:
                log(row)
    return rows
