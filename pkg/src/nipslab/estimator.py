"""Scikit-learn style front end for the kernel map.

``fit(G, U)`` trains on stacks of samples, each an ``(N, d)`` pair of
loadings and solutions from one system.  ``kernel(G, U)`` then returns that
system's learned kernel in physical units, and ``predict(G, U, F)`` applies
it to new loadings without ever forming the ``N x N`` matrix.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from ._validation import check_pairs, grid_side
from .model import (ModelConfig, default_modes, encode, extract_kernel, forward_predict,
                    init_params, load_checkpoint, materialize, save_checkpoint)
from .trainer import AdamState, TrainConfig, TrainingReport, fit as train_loop, relative_l2_loss
from .randfield import split_rng

__all__ = ["NIPSOperator"]


class NIPSOperator(BaseEstimator):
    """Learn a map from (loading, solution) pairs of a system to its kernel.

    Parameters
    ----------
    n_layers : total layers; all but the last are residual attention blocks.
    d_k : query/key width.
    modes : retained Fourier modes per axis (int or pair); ``None`` picks
        ``min(12, n // 2 + 1)``.
    variant : ``"nips"`` (Fourier filter) or ``"nao_wp_linear"`` /
        ``"nao_wp_quadratic"`` (dense token projection).
    scale_data : divide loadings and solutions by their training standard
        deviations before they reach the network.  Kernels and predictions
        are always reported in physical units.
    warm_start : continue from the current parameters and optimizer state
        instead of reinitializing.
    """

    def __init__(self, n_layers: int = 2, d_k: int = 20, modes=5,
                 norm_placement: str = "first-layer-both", variant: str = "nips",
                 learning_rate: float = 1e-3, epochs: int = 500, batch_size: int = 8,
                 lr_decay: float = 0.5, lr_decay_every: int = 100,
                 weight_decay: float = 0.0, scale_data: bool = True,
                 random_state: int = 0, warm_start: bool = False, verbose: bool = False):
        self.n_layers = n_layers
        self.d_k = d_k
        self.modes = modes
        self.norm_placement = norm_placement
        self.variant = variant
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.weight_decay = weight_decay
        self.scale_data = scale_data
        self.random_state = random_state
        self.warm_start = warm_start
        self.verbose = verbose

    # ------------------------------------------------------------ config
    def _model_config(self, n: int, d: int) -> ModelConfig:
        modes = self.modes
        if modes is None:
            modes = default_modes(n)
        elif np.isscalar(modes):
            modes = (int(modes), int(modes))
        return ModelConfig(n=n, d=d, d_k=self.d_k, layers=self.n_layers, modes=tuple(modes),
                           norm_placement=self.norm_placement, variant=self.variant)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                           batch_size=self.batch_size, lr_decay=self.lr_decay,
                           lr_decay_every=self.lr_decay_every,
                           weight_decay=self.weight_decay, seed=self.random_state)

    # ------------------------------------------------------------ training
    def fit(self, G, U, checkpoint_fn=None, checkpoint_every: int = 0):
        """Train on ``(S, N, d)`` stacks.

        ``checkpoint_fn(estimator, epoch)`` is called every
        ``checkpoint_every`` epochs with the estimator in a saveable state.
        """
        G, U = check_pairs(G, U)
        n, d = grid_side(G.shape[1]), G.shape[2]
        resume = self.warm_start and hasattr(self, "params_")
        if resume:
            if (n, d) != (self.config_.n, self.config_.d):
                raise ValueError(f"warm start expects grid {self.config_.n} and d={self.config_.d}")
        else:
            self.config_ = self._model_config(n, d)
            self.params_ = init_params(self.config_, split_rng(self.random_state, 0))
            self.g_scale_, self.u_scale_ = 1.0, 1.0
            if self.scale_data:
                self.g_scale_, self.u_scale_ = float(G.std()), float(U.std())
            self.adam_ = None
            self.report_ = None
            self.epoch_ = 0
        tcfg = self._train_config()
        if checkpoint_every:
            tcfg = TrainConfig(**{**tcfg.to_dict(), "checkpoint_every": int(checkpoint_every)})

        def hook(epoch, params, state, report):
            self.adam_, self.report_, self.epoch_ = state, report, epoch
            checkpoint_fn(self, epoch)

        log = (lambda ep, loss: print(f"epoch {ep}: loss {loss:.6f}", flush=True)) if self.verbose else None
        self.report_, self.adam_ = train_loop(
            self.params_, self.config_, G / self.g_scale_, U / self.u_scale_, tcfg,
            state=self.adam_, start_epoch=self.epoch_, report=self.report_,
            checkpoint_fn=hook if checkpoint_fn else None, log=log)
        self.epoch_ = max(self.epoch_, tcfg.epochs)
        return self

    # ------------------------------------------------------------ inference
    def _factors(self, G, U):
        check_is_fitted(self, "params_")
        G, U = check_pairs(G, U, d=self.config_.d)
        n = grid_side(G.shape[1])
        cfg = self.config_ if n == self.config_.n else self.at_resolution(n).config_
        Gt = T.tensor(G / self.g_scale_)
        Ge, Ve = encode(Gt, T.tensor(U / self.u_scale_), self.params_, cfg)
        A, Bf = extract_kernel(Ge, Ve, self.params_[-1], cfg)
        # U = h^2 (u_s / g_s) A B^T G in physical units
        ratio = self.u_scale_ / self.g_scale_
        return (T.scale(A, ratio), Bf), cfg

    def kernel_factors(self, G, U):
        """``(A, B)`` arrays with ``K = A B^T`` in physical units."""
        (A, Bf), _ = self._factors(G, U)
        return A.data, Bf.data

    def kernel(self, G, U) -> np.ndarray:
        """Materialized ``(S, N, N)`` kernels, one per sample."""
        (A, Bf), _ = self._factors(G, U)
        return materialize(A, Bf)

    def predict(self, G, U, F=None) -> np.ndarray:
        """Solutions for loadings ``F`` (default: the context loadings ``G``)."""
        (A, Bf), cfg = self._factors(G, U)
        F = np.asarray(G if F is None else F, dtype=np.float64)
        if F.ndim == 2:
            F = F[None]
        return forward_predict((A, Bf), F, cfg).data

    def errors(self, G, U, F=None, V=None) -> np.ndarray:
        """Per-sample relative L2 error (mean over instances)."""
        pred = self.predict(G, U, F)
        target = np.asarray(U if V is None else V, dtype=np.float64)
        if target.ndim == 2:
            target = target[None]
        h = 1.0 / (grid_side(target.shape[1]) - 1)
        return np.array([relative_l2_loss(T.tensor(p[None]), t[None], h).data.item()
                         for p, t in zip(pred, target)])

    def score(self, G, U) -> float:
        """Negative mean relative L2 error (higher is better)."""
        return -float(np.mean(self.errors(G, U)))

    def at_resolution(self, n: int) -> "NIPSOperator":
        """Copy that runs on an ``n x n`` grid with the same weights.

        Filters act on a fixed band of wavenumbers and the weight matrices act
        on the instance axis, so nothing needs retraining.
        """
        check_is_fitted(self, "params_")
        if self.config_.variant != "nips":
            raise ValueError("only the Fourier variant transfers across grids")
        clone = NIPSOperator(**self.get_params())
        clone.config_ = ModelConfig(**{**self.config_.to_dict(), "modes": self.config_.modes, "n": n})
        for attr in ("params_", "g_scale_", "u_scale_", "adam_", "report_", "epoch_"):
            setattr(clone, attr, getattr(self, attr))
        return clone

    # ------------------------------------------------------------ persistence
    def save(self, path):
        check_is_fitted(self, "params_")
        losses = list(self.report_.losses) if self.report_ else []
        extra = {
            "estimator": self.get_params(),
            "scales": [self.g_scale_, self.u_scale_],
            "initial_loss": self.report_.initial_loss if self.report_ else None,
            "losses": [repr(float(x)) for x in losses],
            "loss_digest": hashlib.sha256(json.dumps([repr(float(x)) for x in losses]).encode()).hexdigest(),
        }
        save_checkpoint(path, self.config_, self.params_, self.epoch_, extra, self.adam_)

    @classmethod
    def load(cls, path) -> "NIPSOperator":
        cfg, params, header, adam = load_checkpoint(path)
        est = cls(**header["estimator"])
        est.config_, est.params_, est.epoch_ = cfg, params, header["epoch"]
        est.g_scale_, est.u_scale_ = header["scales"]
        est.adam_ = AdamState(*adam) if adam is not None else None
        est.report_ = None
        if header.get("initial_loss") is not None:
            losses = [float(x) for x in header["losses"]]
            # wall times are not stored, so checkpoints stay bit-reproducible
            est.report_ = TrainingReport(initial_loss=header["initial_loss"], losses=losses,
                                         times=[float("nan")] * len(losses),
                                         peak_bytes=[0] * len(losses),
                                         epochs_run=header["epoch"])
        return est
