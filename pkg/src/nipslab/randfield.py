"""Spectral sampling of periodic Gaussian random fields.

A field with covariance ``(-Laplacian + tau^2)^(-alpha)`` is drawn on a
periodic box by filtering real white noise in Fourier space, then the
``[0, 1]^2`` corner is cut out.  With ``period_length=2`` the box is twice the
unit square, which removes the periodic wrap-around from the sample.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["GrfSpec", "periodic_spectrum", "sample_periodic", "sample_grf",
           "binarize_microstructure", "split_rng", "HIGH_PHASE", "LOW_PHASE"]

HIGH_PHASE = 12.0
LOW_PHASE = 3.0


@dataclass(frozen=True)
class GrfSpec:
    tau: float = 5.0
    alpha: float = 4.0
    n: int = 21
    period_length: float = 2.0
    include_dc: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 points per side, got {self.n}")
        if self.period_length < 1.0:
            raise ValueError("period_length must cover the unit square")
        if self.tau == 0 and self.include_dc:
            raise ValueError("tau=0 makes the DC mode singular; set include_dc=False")

    @property
    def box_points(self) -> int:
        """Points per side of the periodic box (same spacing as the target grid)."""
        h = 1.0 / (self.n - 1)
        return max(int(round(self.period_length / h)), self.n)

    def to_dict(self) -> dict:
        return asdict(self)


def periodic_spectrum(spec: GrfSpec) -> np.ndarray:
    """Eigenvalues ``(w1^2 + w2^2 + tau^2)^(-alpha)`` on the rfft2 half grid.

    ``w = 2 pi k / period_length`` are angular wavenumbers.
    """
    m = spec.box_points
    k1 = np.fft.fftfreq(m, d=1.0 / m)
    k2 = np.fft.rfftfreq(m, d=1.0 / m)
    w1 = 2 * np.pi * k1[:, None] / spec.period_length
    w2 = 2 * np.pi * k2[None, :] / spec.period_length
    lam2 = w1 ** 2 + w2 ** 2 + spec.tau ** 2
    with np.errstate(divide="ignore"):
        gamma = lam2 ** (-spec.alpha)
    if not spec.include_dc:
        gamma[0, 0] = 0.0
    return gamma


def _full_spectrum_sum(gamma: np.ndarray, m: int) -> float:
    w = np.full(gamma.shape[1], 2.0)
    w[0] = 1.0
    if m % 2 == 0:
        w[-1] = 1.0
    return float((gamma * w).sum())


def sample_periodic(spec: GrfSpec, rng: np.random.Generator | None = None,
                    noise: np.ndarray | None = None) -> np.ndarray:
    """One field on the full periodic box, scaled to unit pointwise variance.

    ``noise`` overrides the white-noise draw (shape ``(m, m)``).
    """
    m = spec.box_points
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = rng.standard_normal((m, m))
    elif noise.shape != (m, m):
        raise ValueError(f"noise must have shape {(m, m)}, got {noise.shape}")
    gamma = periodic_spectrum(spec)
    # pointwise variance of irfft2(sqrt(gamma) * rfft2(white)) is sum(gamma) / m^2
    amp = np.sqrt(gamma * (m * m) / _full_spectrum_sum(gamma, m))
    return np.fft.irfft2(amp * np.fft.rfft2(noise), s=(m, m))


def sample_grf(spec: GrfSpec, rng: np.random.Generator | None = None,
               noise: np.ndarray | None = None) -> np.ndarray:
    """Sample restricted to the ``n x n`` grid on ``[0, 1]^2``."""
    return sample_periodic(spec, rng, noise)[: spec.n, : spec.n].copy()


def binarize_microstructure(xi) -> np.ndarray:
    """Two-phase permeability: 12 where ``xi < 0``, 3 elsewhere."""
    xi = np.asarray(xi, dtype=np.float64)
    return np.where(xi < 0, HIGH_PHASE, LOW_PHASE)


def split_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``.

    The key is hashed by ``SeedSequence(seed, spawn_key=key)``, so streams for
    different system indices never overlap and do not depend on build order.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))
