"""Relative-L2 objective, Adam, and the epoch loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .model import (ModelConfig, TrainingDiagnosticError, encode, extract_kernel,
                    forward_predict, param_list)
from .randfield import split_rng

__all__ = ["TrainConfig", "AdamState", "relative_l2_loss", "adam_step", "sample_loss",
           "fit", "TrainingReport", "init_adam"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 500
    batch_size: int = 8
    lr_decay: float = 0.5
    lr_decay_every: int = 100
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- objective

def relative_l2_loss(pred: T.Tensor, target, h: float = 1.0) -> T.Tensor:
    """Mean over instances of ``||pred_i - u_i|| / ||u_i||`` (L2 with weight h^2).

    ``pred`` and ``target`` are ``(..., N, k)``; norms run over tokens.  The
    quadrature weight cancels in the ratio but is kept for clarity.
    """
    target = np.asarray(target.data if isinstance(target, T.Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    den = np.sqrt(h * h * (target * target).sum(axis=-2))
    if np.any(den == 0):
        raise ValueError("target column with zero norm")
    diff = T.sub(pred, T.tensor(target))
    num = T.sqrt(T.scale(T.sum_(T.mul(diff, diff), axis=-2), h * h))
    return T.mean(T.div(num, T.tensor(den)))


def sample_loss(params, cfg: ModelConfig, G, U) -> T.Tensor:
    """Build each sample's kernel from its own pairs and predict those pairs."""
    Gt, Ut = T.tensor(G), T.tensor(U)
    Ge, Ve = encode(Gt, Ut, params, cfg)
    factors = extract_kernel(Ge, Ve, params[-1], cfg)
    pred = forward_predict(factors, Gt, cfg)
    return relative_l2_loss(pred, U, cfg.h)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int
    m: list
    v: list


def init_adam(params) -> AdamState:
    pl = param_list(params)
    return AdamState(0, [np.zeros_like(p.data) for p in pl],
                     [np.zeros(p.shape) for p in pl])


def adam_step(params, grads, state: AdamState, cfg: TrainConfig, lr: float | None = None):
    """Bias-corrected Adam update in place.

    ``grads`` aligns with ``param_list(params)``; ``None`` means zero.  Complex
    parameters use ``|g|^2`` for the second moment.
    """
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    for i, p in enumerate(param_list(params)):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * (g * np.conj(g)).real
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.eps_adam)
    return params, state


# ---------------------------------------------------------------- loop

@dataclass
class TrainingReport:
    initial_loss: float
    losses: list = field(default_factory=list)
    times: list = field(default_factory=list)
    peak_bytes: list = field(default_factory=list)
    epochs_run: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else self.initial_loss

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "time_s", "peak_bytes"])
            w.writerow([0, f"{self.initial_loss:.17g}", "0", "0"])
            for i, (l, t, b) in enumerate(zip(self.losses, self.times, self.peak_bytes)):
                w.writerow([i + 1, f"{l:.17g}", f"{t:.6f}", b])

    def summary(self) -> dict:
        return {"initial_loss": self.initial_loss, "final_loss": self.final_loss,
                "epochs_run": self.epochs_run,
                "mean_epoch_time_s": float(np.mean(self.times)) if self.times else 0.0,
                "max_peak_bytes": int(max(self.peak_bytes)) if self.peak_bytes else 0}


def _eval_loss(params, cfg, G, U, batch) -> float:
    total = 0.0
    for i in range(0, len(G), batch):
        total += sample_loss(params, cfg, G[i:i + batch], U[i:i + batch]).data.item() * len(G[i:i + batch])
    return total / len(G)


def fit(params, cfg: ModelConfig, G, U, tcfg: TrainConfig, *,
        state: AdamState | None = None, start_epoch: int = 0,
        report: TrainingReport | None = None,
        checkpoint_fn: Callable | None = None,
        log: Callable | None = None):
    """Train ``params`` in place on samples ``G, U`` of shape ``(S, N, d)``.

    Epoch ``e`` shuffles with ``split_rng(seed, 3, e)`` so a run resumed from
    a checkpoint at epoch ``e`` replays the same batches.
    Returns ``(report, adam_state)``.
    """
    G = np.asarray(G, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    state = state or init_adam(params)
    if report is None:
        report = TrainingReport(initial_loss=_eval_loss(params, cfg, G, U, 64))
    pl = param_list(params)
    for epoch in range(start_epoch, tcfg.epochs):
        T.reset_peak()
        t0 = time.perf_counter()
        order = split_rng(tcfg.seed, 3, epoch).permutation(len(G))
        lr = tcfg.lr_at(epoch)
        total = 0.0
        for i in range(0, len(order), tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            with T.Tape() as tape:
                loss = sample_loss(params, cfg, G[idx], U[idx])
            value = loss.data.item()
            if not math.isfinite(value):
                raise TrainingDiagnosticError(
                    f"non-finite loss at epoch {epoch + 1}; "
                    + _activation_report(params, cfg, G[idx], U[idx]))
            grads = tape.backward(loss)
            adam_step(params, [grads.get(p) for p in pl], state, tcfg, lr)
            total += value * len(idx)
        report.losses.append(total / len(G))
        report.times.append(time.perf_counter() - t0)
        report.peak_bytes.append(T.peak_alloc_bytes())
        report.epochs_run = epoch + 1
        if log:
            log(epoch + 1, report.losses[-1])
        if checkpoint_fn and tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            checkpoint_fn(epoch + 1, params, state, report)
    return report, state


def _activation_report(params, cfg, G, U) -> str:
    Gt, Vt = T.tensor(G), T.tensor(U)
    from .model import attention_block
    parts = []
    for l in range(cfg.layers - 1):
        Gt, Vt = attention_block(Gt, Vt, params[l], cfg, l)
        parts.append(f"layer {l + 1}: max|g|={np.nanmax(np.abs(Gt.data)):.3e}, "
                     f"max|v|={np.nanmax(np.abs(Vt.data)):.3e}")
    return "; ".join(parts)
