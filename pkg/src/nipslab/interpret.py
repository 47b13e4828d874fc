"""Reading physics back out of a learned kernel.

Three tools: the row-sum map ``s(x) = h^2 sum_y |K(x, y)|``, an Otsu split of
that map into the two phases, and a fit of nodal permeabilities ``B`` whose
inverse stiffness matches ``h^2 K`` on the interior.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .darcy import (Grid2D, SolverError, assemble_stiffness, edge_list, greens_kernel,
                    interior_mask)
from .randfield import HIGH_PHASE, LOW_PHASE

__all__ = ["rowsum_map", "threshold_twophase", "otsu_threshold", "recovery_objective",
           "recover_permeability", "microstructure_error", "RecoveryResult",
           "PermeabilityRecovery", "DegenerateThresholdError", "phase_agreement",
           "homogeneous_rowsum", "PHASE_CUT"]


class DegenerateThresholdError(ValueError):
    pass


def _grid_side(K) -> int:
    K = np.asarray(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"kernel must be square, got {K.shape}")
    n = int(round(np.sqrt(K.shape[0])))
    if n * n != K.shape[0]:
        raise ValueError(f"{K.shape[0]} nodes do not form a square grid")
    return n


def _neighbourhood(n: int, radius: int) -> np.ndarray:
    i, j = np.divmod(np.arange(n * n), n)
    return np.maximum(np.abs(i[:, None] - i[None]), np.abs(j[:, None] - j[None])) <= radius


def rowsum_map(K, radius: int | None = None) -> np.ndarray:
    """Interaction strength ``h^2 sum_y |K(x, y)|`` on the grid; boundary is 0.

    ``radius`` limits the sum to nodes within that many grid steps
    (Chebyshev distance); ``None`` sums the whole row.
    """
    K = np.abs(np.asarray(K, dtype=np.float64))
    n = _grid_side(K)
    h = 1.0 / (n - 1)
    if radius is not None:
        K = K * _neighbourhood(n, radius)
    s = (h * h * K.sum(axis=1)).reshape(n, n)
    s[~interior_mask(n)] = 0.0
    return s


def otsu_threshold(values, bins: int = 256) -> float:
    """Threshold maximizing the between-class variance of ``values``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if not hi - lo > 1e-9 * max(abs(hi), abs(lo)):
        raise DegenerateThresholdError("cannot threshold a constant field")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / w0
        mu1 = (s0[-1] - s0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    return float(edges[k + 1])


# reference-normalized strength midway (geometrically) between the phases
PHASE_CUT = 1.0 / np.sqrt(LOW_PHASE * HIGH_PHASE)


def homogeneous_rowsum(n: int, radius: int | None = None) -> np.ndarray:
    """Row-sum map of the unit-permeability kernel; positive on the interior."""
    return rowsum_map(greens_kernel(np.ones((n, n))), radius)


def threshold_twophase(s, reference=None, cut: float | None = None) -> tuple[np.ndarray, float]:
    """Split an interaction map into the two phases.

    Strong interaction means a poorly conducting node, so values above the
    threshold get the low permeability.  ``reference`` (for instance
    ``homogeneous_rowsum(n)``) divides out the pull of the Dirichlet
    boundary before the split.  The ratio then estimates ``1 / b`` and Otsu
    runs on its logarithm; ``cut`` (e.g. ``PHASE_CUT``) replaces the Otsu
    threshold with a fixed one.  Boundary entries are labelled from the same
    rule but carry no information.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    mask = interior_mask(n)
    if reference is not None:
        ref = np.asarray(reference, dtype=np.float64)
        if ref.shape != s.shape:
            raise ValueError(f"reference {ref.shape} does not match map {s.shape}")
        s = np.divide(s, ref, out=np.zeros_like(s), where=mask)
    inner = s[mask] if n > 2 else s.ravel()
    if cut is not None:
        t = float(cut)
    elif reference is not None:
        # the phases differ by a factor in 1/b, so split in log space
        positive = inner[inner > 0]
        if positive.size < inner.size:
            raise DegenerateThresholdError("normalized map has non-positive interior values")
        t = float(np.exp(otsu_threshold(np.log(positive))))
    else:
        t = otsu_threshold(inner)
    labels = np.where(s > t, LOW_PHASE, HIGH_PHASE)
    return labels, t


def phase_agreement(labels, b) -> float:
    """Fraction of interior nodes where ``labels`` matches ``b``."""
    mask = interior_mask(np.asarray(b).shape[0])
    return float(np.mean(np.asarray(labels)[mask] == np.asarray(b)[mask]))


# ---------------------------------------------------------------- recovery

class _Stencil:
    """Cached edge incidence for the permeability gradient."""

    def __init__(self, n: int):
        self.grid = Grid2D(n)
        self.a, self.c, self.ia, self.ic = edge_list(n)
        self.both = self.ic >= 0
        # a checkerboard on the nodes touched by edges leaves every
        # arithmetic-mean edge coefficient unchanged
        active = np.zeros(self.grid.n_nodes)
        active[self.a] = 1.0
        active[self.c] = 1.0
        i, j = np.divmod(np.arange(self.grid.n_nodes), n)
        chi = np.where((i + j) % 2 == 0, 1.0, -1.0) * active
        self.null = (chi / np.linalg.norm(chi)).reshape(n, n)

    def project(self, step: np.ndarray) -> np.ndarray:
        """Drop the component of ``step`` along the null direction."""
        return step - np.sum(step * self.null) * self.null

    def gradient(self, M: np.ndarray) -> np.ndarray:
        """``d/dB`` of ``sum_ij M_ij K_B[i, j]`` on the full nodal grid."""
        ia, ic, both = self.ia, self.ic, self.both
        dcoef = M[ia, ia].copy()
        dcoef[both] += (M[ic[both], ic[both]] - M[ia[both], ic[both]] - M[ic[both], ia[both]])
        dcoef *= 0.5 / self.grid.h ** 2
        g = np.zeros(self.grid.n_nodes)
        np.add.at(g, self.a, dcoef)
        np.add.at(g, self.c, dcoef)
        return g.reshape(self.grid.n, self.grid.n)


def _interior_target(K_learned) -> np.ndarray:
    K = np.asarray(K_learned, dtype=np.float64)
    n = _grid_side(K)
    idx = np.flatnonzero(interior_mask(n).ravel())
    h = 1.0 / (n - 1)
    return h * h * K[np.ix_(idx, idx)]


def recovery_objective(B, target, stencil: _Stencil | None = None, with_grad: bool = True):
    """``||K_B^{-1} - target||_F^2`` and its gradient with respect to ``B``.

    ``target`` is the interior block of ``h^2 K``.  The gradient follows from
    ``d(K^{-1}) = -K^{-1} dK K^{-1}``.
    """
    B = np.asarray(B, dtype=np.float64)
    stencil = stencil or _Stencil(B.shape[0])
    Kb = assemble_stiffness(B, stencil.grid)
    try:
        inv = np.linalg.inv(Kb)
    except np.linalg.LinAlgError as exc:
        raise SolverError("singular stiffness during recovery") from exc
    E = inv - target
    obj = float(np.sum(E * E))
    if not with_grad:
        return obj
    M = inv.T @ E @ inv.T
    return obj, -2.0 * stencil.gradient(M)


def microstructure_error(B, b) -> float:
    """Relative L2 error on interior nodes."""
    mask = interior_mask(np.asarray(b).shape[0])
    b = np.asarray(b, dtype=np.float64)[mask]
    return float(np.linalg.norm(np.asarray(B)[mask] - b) / np.linalg.norm(b))


@dataclass
class RecoveryResult:
    B_star: np.ndarray
    objective: list = field(default_factory=list)
    microstructure_error: float | None = None
    labels: np.ndarray | None = None
    threshold: float | None = None
    iterations: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("B_star", "labels"):
            if out[key] is not None:
                out[key] = np.asarray(out[key]).tolist()
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _tv_gauge(B, stencil: _Stencil) -> np.ndarray:
    """Move ``B`` along the null direction to the least total variation.

    Total variation is piecewise linear in the offset, so its minimum sits
    at one of the per-edge breakpoints.
    """
    flat, chi = B.ravel(), stencil.null.ravel()
    db = flat[stencil.a] - flat[stencil.c]
    dc = chi[stencil.a] - chi[stencil.c]
    moving = dc != 0
    cands = np.concatenate([[0.0], -db[moving] / dc[moving]])
    tv = np.abs(db[None, :] + cands[:, None] * dc[None, :]).sum(axis=1)
    return B + cands[int(np.argmin(tv))] * stencil.null


def _adam_descent(B, target, stencil, lr, max_iter, tol, window, bounds, max_halvings):
    lo, hi = bounds
    m = np.zeros_like(B)
    v = np.zeros_like(B)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace = []
    obj, grad = recovery_objective(B, target, stencil)
    it = 0
    rate, halvings, last_cut = lr, 0, 0
    for it in range(1, max_iter + 1):
        trace.append(obj)
        if it - last_cut > window and trace[-window - 1] - obj <= tol * trace[-window - 1]:
            if halvings == max_halvings:
                break
            rate, halvings, last_cut = 0.5 * rate, halvings + 1, it
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        step = rate * (m / (1 - beta1 ** it)) / (np.sqrt(v / (1 - beta2 ** it)) + eps)
        step = stencil.project(step)
        for _ in range(20):
            trial = np.clip(B - step, lo, hi)
            try:
                obj, grad = recovery_objective(trial, target, stencil)
                break
            except SolverError:
                step = 0.5 * step
        else:
            raise SolverError("recovery could not find a non-singular step")
        B = trial
    else:
        trace.append(obj)
    return B, trace, it


def _lbfgs_descent(B, target, stencil, max_iter, bounds):
    n = B.shape[0]
    scale = float(np.sum(target * target)) or 1.0
    trace = []

    def fun(x):
        obj, grad = recovery_objective(x.reshape(n, n), target, stencil)
        return obj / scale, stencil.project(grad).ravel() / scale

    def record(x):
        trace.append(recovery_objective(x.reshape(n, n), target, stencil, with_grad=False))

    record(B.ravel())
    res = scipy.optimize.minimize(
        fun, B.ravel(), jac=True, method="L-BFGS-B", callback=record,
        bounds=[tuple(bounds)] * B.size,
        options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-12})
    return res.x.reshape(n, n), trace, int(res.nit)


def recover_permeability(K_learned, b_true=None, *, method: str = "lbfgs",
                         lr: float = 0.05, max_iter: int = 2000, tol: float = 1e-6,
                         window: int = 50,
                         init: float = 0.5 * (LOW_PHASE + HIGH_PHASE),
                         bounds: tuple = (0.5, 50.0),
                         max_halvings: int = 8, gauge: bool = True) -> RecoveryResult:
    """Fit nodal permeabilities whose inverse stiffness matches ``h^2 K``.

    ``method="lbfgs"`` runs bounded L-BFGS on the analytic gradient.
    ``method="adam"`` runs clamped Adam; when the objective drops by less
    than ``tol`` (relative) over ``window`` steps the step size halves, and
    the fit stops after ``max_halvings`` such plateaus.

    Both strip the checkerboard direction, which changes no edge coefficient
    and so is invisible to the objective.  With ``gauge=True`` the offset
    along it is then chosen to minimize total variation.
    """
    if method not in ("lbfgs", "adam"):
        raise ValueError(f"unknown method {method!r}")
    target = _interior_target(K_learned)
    n = _grid_side(K_learned)
    stencil = _Stencil(n)
    B0 = np.full((n, n), float(init))
    if method == "adam":
        B, trace, it = _adam_descent(B0, target, stencil, lr, max_iter, tol, window,
                                     bounds, max_halvings)
    else:
        B, trace, it = _lbfgs_descent(B0, target, stencil, max_iter, bounds)
    if gauge:
        B = np.clip(_tv_gauge(B, stencil), *bounds)
    if not np.all(np.isfinite(B)):
        raise SolverError("recovered permeability is not finite")
    try:
        labels, t = threshold_twophase(rowsum_map(K_learned), reference=homogeneous_rowsum(n))
    except DegenerateThresholdError:
        labels, t = None, None
    err = microstructure_error(B, b_true) if b_true is not None else None
    return RecoveryResult(B, trace, err, labels, t, it)


class PermeabilityRecovery(BaseEstimator):
    """Estimator wrapper: ``fit(K, b)`` stores ``B_star_`` and ``result_``."""

    def __init__(self, method: str = "lbfgs", lr: float = 0.05, max_iter: int = 2000,
                 tol: float = 1e-6, window: int = 50, init: float = 7.5,
                 bounds: tuple = (0.5, 50.0), max_halvings: int = 8, gauge: bool = True):
        self.method = method
        self.lr = lr
        self.max_iter = max_iter
        self.tol = tol
        self.window = window
        self.init = init
        self.bounds = bounds
        self.max_halvings = max_halvings
        self.gauge = gauge

    def fit(self, K, b=None):
        self.result_ = recover_permeability(K, b, **self.get_params())
        self.B_star_ = self.result_.B_star
        return self

    def predict(self, K=None):
        """Recovered field; thresholded phases live in ``result_.labels``."""
        check_is_fitted(self, "B_star_")
        return self.B_star_

    def score(self, K, b) -> float:
        """Negative interior relative error of a fresh recovery."""
        return -microstructure_error(self.fit(K, b).B_star_, b)
