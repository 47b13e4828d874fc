"""Linear-attention kernel map with a Fourier-space query filter.

Tokens are grid nodes (row-major), channels are the ``d`` in-context function
instances.  A sample is a pair ``(G, V)`` of ``(N, d)`` arrays holding the
loadings and the solutions; everything here is batched as ``(B, N, d)``.

One iterative block maps ``(G, V)`` to::

    S_g = h^2 (G W_K)^T G,      S_v = h^2 (V W_K)^T V
    Q_g = filter(G W_Q),        Q_v = filter(V W_Q)
    G' = G + N(c (Q_g S_g + Q_g S_v))
    V' = V + N(c (Q_v S_g + Q_v S_v))

with ``c = 1/sqrt(d_k)`` and ``filter`` a per-channel Fourier multiplier on
the lowest modes.  ``N`` normalizes the stacked ``(g, v)`` update.  The last
layer returns the rank-``d_k`` kernel
``K = c (filter_L(G W_Q) + filter_L(V W_Q)) (G W_K)^T``.

The ``nao_wp_*`` variants swap the filter for a dense ``2N x 2N`` projection
acting on the stacked streams.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T

__all__ = [
    "ModelConfig", "init_params", "fourier_filter", "attention_block",
    "quadratic_baseline_block", "encode", "extract_kernel", "forward_predict",
    "count_params", "param_list", "circulant_matrix", "save_checkpoint",
    "load_checkpoint", "CheckpointError", "TrainingDiagnosticError", "VARIANTS",
    "NORM_PLACEMENTS",
]

VARIANTS = ("nips", "nao_wp_quadratic", "nao_wp_linear")
NORM_PLACEMENTS = ("first-layer-both", "all-layers-both")
LN_EPS = 1e-5


class CheckpointError(ValueError):
    pass


class TrainingDiagnosticError(FloatingPointError):
    """Non-finite activations; message lists each layer's max magnitude."""


@dataclass(frozen=True)
class ModelConfig:
    n: int = 11
    d: int = 30
    d_k: int = 20
    layers: int = 2
    modes: tuple = (5, 5)
    norm_placement: str = "first-layer-both"
    variant: str = "nips"

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        if self.layers < 2:
            raise ValueError("need at least 2 layers (iterative blocks + kernel layer)")
        if self.d < 1 or self.d_k < 1:
            raise ValueError("d and d_k must be positive")
        if self.n < 3:
            raise ValueError("grid needs n >= 3")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ValueError(f"norm_placement must be one of {NORM_PLACEMENTS}")
        m1, m2 = self.modes
        if not 1 <= m1 <= self.n // 2 + 1 or not 1 <= m2 <= self.n // 2 + 1:
            raise ValueError(
                f"modes {self.modes} exceed the Nyquist limits ({self.n}, {self.n // 2 + 1})")

    @property
    def n_tokens(self) -> int:
        return self.n * self.n

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d_k)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["modes"] = list(self.modes)
        return out

    @classmethod
    def from_dict(cls, dct) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "modes" else v) for k, v in dct.items()})

    @property
    def r_shape(self) -> tuple:
        return (T.mode_rows(self.n, self.modes[0]), self.modes[1], self.d_k)


def default_modes(n: int, cap: int = 12) -> tuple:
    return (min(cap, n // 2 + 1), min(cap, n // 2 + 1))


# ---------------------------------------------------------------- parameters

def init_params(cfg: ModelConfig, rng: np.random.Generator) -> list[dict]:
    """Per-layer dicts with ``W_Q``, ``W_K`` and ``R`` (or ``W_P``)."""
    bound = 1.0 / math.sqrt(cfg.d)
    layers = []
    for _ in range(cfg.layers):
        p = {
            "W_Q": T.tensor(rng.uniform(-bound, bound, (cfg.d, cfg.d_k)), requires_grad=True),
            "W_K": T.tensor(rng.uniform(-bound, bound, (cfg.d, cfg.d_k)), requires_grad=True),
        }
        if cfg.variant == "nips":
            shape = cfg.r_shape
            s = 1.0 / (shape[0] * shape[1])
            R = s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
            p["R"] = T.tensor(R, requires_grad=True)
        else:
            size = 2 * cfg.n_tokens
            p["W_P"] = T.tensor(rng.standard_normal((size, size)) / size, requires_grad=True)
        layers.append(p)
    return layers


def param_list(params: Sequence[dict]) -> list[T.Tensor]:
    """Flat list in declaration order (layer by layer, sorted keys)."""
    return [layer[k] for layer in params for k in sorted(layer)]


def count_params(cfg: ModelConfig) -> int:
    """Learnable real scalars; complex entries count twice."""
    per_layer = 2 * cfg.d * cfg.d_k
    if cfg.variant == "nips":
        per_layer += 2 * int(np.prod(cfg.r_shape))
    else:
        per_layer += (2 * cfg.n_tokens) ** 2
    return cfg.layers * per_layer


# ---------------------------------------------------------------- blocks

def fourier_filter(Y: T.Tensor, R: T.Tensor, n: int) -> T.Tensor:
    """Per-channel multiplier on the retained modes of each ``(n, n)`` map.

    ``Y`` is ``(B, N, c)`` with ``N = n * n``; channels never mix.
    """
    B, N, c = Y.shape
    if N != n * n:
        raise ValueError(f"{N} tokens do not form an {n}x{n} grid")
    grid = T.reshape(Y, (B, n, n, c))
    spec = T.spectral_mul(T.rfft2(grid), R)
    return T.reshape(T.irfft2(spec, n), (B, N, c))


def circulant_matrix(R: np.ndarray, n: int, channel: int = 0) -> np.ndarray:
    """Dense ``N x N`` matrix of ``fourier_filter`` for one channel.

    Built by pushing the unit basis through the filter, so it is exactly the
    operator used by the model (including Hermitian handling).
    """
    N = n * n
    eye = T.tensor(np.eye(N)[None, :, :].transpose(2, 1, 0))  # (N, N, 1): sample k = e_k
    Rc = T.tensor(R[..., channel:channel + 1])
    cols = fourier_filter(eye, Rc, n).data[..., 0]  # row k is filter(e_k)
    return cols.T


def _project(Y: T.Tensor, params: dict, cfg: ModelConfig) -> T.Tensor:
    return fourier_filter(Y, params["R"], cfg.n)


def _queries(G, V, params, cfg):
    Yg = T.matmul(G, params["W_Q"])
    Yv = T.matmul(V, params["W_Q"])
    if cfg.variant == "nips":
        return fourier_filter(Yg, params["R"], cfg.n), fourier_filter(Yv, params["R"], cfg.n)
    N = cfg.n_tokens
    stacked = T.concat([Yg, Yv], axis=1)
    Q = T.scale(T.matmul(params["W_P"], stacked), cfg.h ** 2)
    return T.take(Q, 0, N, axis=1), T.take(Q, N, 2 * N, axis=1)


def _norm_axes(cfg: ModelConfig, layer_index: int):
    if layer_index == 0 or cfg.norm_placement == "all-layers-both":
        return (-2, -1)
    return (-1,)


def attention_block(G: T.Tensor, V: T.Tensor, params: dict, cfg: ModelConfig,
                    layer_index: int = 0):
    """One residual block; returns ``(G', V')``."""
    h2 = cfg.h ** 2
    Qg, Qv = _queries(G, V, params, cfg)
    Kg = T.matmul(G, params["W_K"])
    Kv = T.matmul(V, params["W_K"])
    N = cfg.n_tokens
    if cfg.variant == "nao_wp_quadratic":
        # materialize the N x N attention maps before applying them
        Ag = T.scale(T.matmul(Qg, T.transpose(Kg)), h2)
        Av = T.scale(T.matmul(Qg, T.transpose(Kv)), h2)
        Bg = T.scale(T.matmul(Qv, T.transpose(Kg)), h2)
        Bv = T.scale(T.matmul(Qv, T.transpose(Kv)), h2)
        upd_g = T.add(T.matmul(Ag, G), T.matmul(Av, V))
        upd_v = T.add(T.matmul(Bg, G), T.matmul(Bv, V))
    else:
        Sg = T.scale(T.matmul(T.transpose(Kg), G), h2)
        Sv = T.scale(T.matmul(T.transpose(Kv), V), h2)
        S = T.add(Sg, Sv)
        upd_g = T.matmul(Qg, S)
        upd_v = T.matmul(Qv, S)
    upd = T.scale(T.concat([upd_g, upd_v], axis=1), cfg.scale)
    upd = T.layer_norm(upd, _norm_axes(cfg, layer_index), LN_EPS)
    G2 = T.add(G, T.take(upd, 0, N, axis=1))
    V2 = T.add(V, T.take(upd, N, 2 * N, axis=1))
    return G2, V2


def quadratic_baseline_block(G, V, params: dict, cfg: ModelConfig, layer_index: int = 0):
    """Dense-projection block (``params`` carries ``W_P``)."""
    if cfg.variant == "nips":
        cfg = ModelConfig(**{**cfg.to_dict(), "modes": cfg.modes, "variant": "nao_wp_quadratic"})
    return attention_block(G, V, params, cfg, layer_index)


def _check_finite(acts, layer_index):
    bad = [a for a in acts if not np.all(np.isfinite(a.data))]
    if bad:
        mags = ", ".join(
            f"{np.max(np.abs(a.data), initial=0.0, where=np.isfinite(a.data)):.3e} "
            f"({np.count_nonzero(~np.isfinite(a.data))} non-finite)" for a in acts)
        raise TrainingDiagnosticError(
            f"non-finite activations after block {layer_index + 1}; finite max magnitudes: {mags}")


def encode(G, V, params: Sequence[dict], cfg: ModelConfig):
    """Run the ``L - 1`` iterative blocks."""
    G, V = T.tensor(G) if not isinstance(G, T.Tensor) else G, T.tensor(V) if not isinstance(V, T.Tensor) else V
    for l in range(cfg.layers - 1):
        G, V = attention_block(G, V, params[l], cfg, l)
        _check_finite((G, V), l)
    return G, V


def extract_kernel(G, V, params_L: dict, cfg: ModelConfig):
    """Factors ``(A, B)`` with ``K = A B^T`` from the last-layer parameters."""
    Qg, Qv = _queries(G, V, params_L, cfg)
    A = T.scale(T.add(Qg, Qv), cfg.scale)
    Bf = T.matmul(G, params_L["W_K"])
    return A, Bf


def materialize(A: T.Tensor, Bf: T.Tensor) -> np.ndarray:
    return np.matmul(A.data, np.swapaxes(Bf.data, -1, -2))


def forward_predict(factors, F, cfg: ModelConfig) -> T.Tensor:
    """``h^2 A (B^T F)`` without forming ``K``.  ``F`` is ``(B, N, k)``."""
    A, Bf = factors
    F = F if isinstance(F, T.Tensor) else T.tensor(F)
    if F.shape[-2] != A.shape[-2]:
        raise ValueError(f"load has {F.shape[-2]} tokens, kernel has {A.shape[-2]}")
    return T.scale(T.matmul(A, T.matmul(T.transpose(Bf), F)), cfg.h ** 2)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"NIPSCK1\x00"


def save_checkpoint(path, cfg: ModelConfig, params, epoch: int = 0,
                    extra: dict | None = None, adam=None):
    """Magic, 4-byte LE header length, JSON header, raw LE float64 blocks.

    Parameter blocks come first in declaration order, then (if given) the
    optimizer moments.  Complex blocks are interleaved (re, im) pairs.
    """
    blocks = [("param", li, key, layer[key].data)
              for li, layer in enumerate(params) for key in sorted(layer)]
    if adam is not None:
        names = [(li, key) for li, layer in enumerate(params) for key in sorted(layer)]
        blocks += [("adam_m", li, key, m) for (li, key), m in zip(names, adam.m)]
        blocks += [("adam_v", li, key, v) for (li, key), v in zip(names, adam.v)]
    layout = []
    payload = io.BytesIO()
    for group, li, key, arr in blocks:
        cplx = bool(np.iscomplexobj(arr))
        layout.append({"group": group, "layer": li, "name": key,
                       "shape": list(arr.shape), "complex": cplx})
        raw = np.ascontiguousarray(arr).view(np.float64) if cplx else arr
        payload.write(np.ascontiguousarray(raw, dtype="<f8").tobytes())
    header = {"config": cfg.to_dict(), "epoch": int(epoch), "blocks": layout,
              "adam_step": int(adam.step) if adam is not None else None}
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(payload.getvalue())


def load_checkpoint(path):
    """Returns ``(cfg, params, header, adam_arrays)``.

    ``adam_arrays`` is ``None`` or ``(step, m_list, v_list)``.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic at offset 0 in {path}")
    if len(blob) < 12:
        raise CheckpointError("truncated checkpoint header at offset 8")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header at offset 12: {exc}") from exc
    cfg = ModelConfig.from_dict(header["config"])
    params = [dict() for _ in range(cfg.layers)]
    moments = {"adam_m": [], "adam_v": []}
    off = 12 + hlen
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) * (2 if entry["complex"] else 1)
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated at offset {len(blob)} (need {end})")
        arr = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64)
        arr = arr.view(np.complex128).reshape(shape) if entry["complex"] else arr.reshape(shape)
        if entry["group"] == "param":
            params[entry["layer"]][entry["name"]] = T.tensor(arr.copy(), requires_grad=True)
        else:
            moments[entry["group"]].append(arr.copy())
        off = end
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after offset {off}")
    adam = None
    if header.get("adam_step") is not None:
        adam = (header["adam_step"], moments["adam_m"], moments["adam_v"])
    return cfg, params, header, adam
