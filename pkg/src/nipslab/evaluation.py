"""Zero-shot metrics on held-out systems, sweeps and stability checks."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .darcy import greens_kernel, interior_mask
from .dataset import stack_samples, training_samples
from .estimator import NIPSOperator
from .randfield import split_rng

__all__ = ["system_stack", "eval_forward", "eval_kernel", "kernel_error", "EvalReport",
           "evaluate", "permutation_stability", "sweep", "write_table", "SweepError",
           "digest_arrays", "config_digest"]


class SweepError(RuntimeError):
    pass


def system_stack(records, d: int):
    """Each system's first ``d`` pairs as ``(S, N, d)`` stacks."""
    G, U = [], []
    for rec in records:
        if d > rec.d_pool:
            raise ValueError(f"system {rec.system_id} has {rec.d_pool} pairs, asked for {d}")
        g, u = rec.columns(np.arange(d))
        G.append(g)
        U.append(u)
    return np.stack(G), np.stack(U)


def eval_forward(model: NIPSOperator, records, d: int) -> np.ndarray:
    """Per-system mean relative L2 error of predicting the context pairs."""
    G, U = system_stack(records, d)
    return model.errors(G, U)


def kernel_error(K, b) -> float:
    """Relative Frobenius error against the exact kernel, interior block only."""
    K = np.asarray(K, dtype=np.float64)
    exact = greens_kernel(b)
    if K.shape != exact.shape:
        raise ValueError(f"kernel {K.shape} does not match grid kernel {exact.shape}")
    idx = np.flatnonzero(interior_mask(np.asarray(b).shape[0]).ravel())
    blk = np.ix_(idx, idx)
    return float(np.linalg.norm(K[blk] - exact[blk]) / np.linalg.norm(exact[blk]))


def eval_kernel(model: NIPSOperator, records, d: int) -> np.ndarray:
    G, U = system_stack(records, d)
    kernels = model.kernel(G, U)
    return np.array([kernel_error(K, rec.b) for K, rec in zip(kernels, records)])


def digest_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def config_digest(model: NIPSOperator) -> str:
    payload = {"estimator": model.get_params(), "model": model.config_.to_dict()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class EvalReport:
    forward_errors: list
    kernel_errors: list
    system_ids: list
    config_digest: str = ""
    dataset_digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def E_forward(self) -> float:
        return float(np.mean(self.forward_errors))

    @property
    def E_inverse(self) -> float:
        return float(np.mean(self.kernel_errors)) if self.kernel_errors else float("nan")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["E_forward"] = self.E_forward
        out["E_inverse"] = self.E_inverse
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def evaluate(model: NIPSOperator, records, d: int, dataset_digest: str = "",
             with_kernel: bool = True) -> EvalReport:
    fwd = eval_forward(model, records, d)
    ker = eval_kernel(model, records, d) if with_kernel else np.array([])
    return EvalReport([float(x) for x in fwd], [float(x) for x in ker],
                      [int(r.system_id) for r in records], config_digest(model), dataset_digest)


def permutation_stability(model: NIPSOperator, record, d: int, n_perm: int,
                          seed: int = 0) -> float:
    """Spread of the kernel over column orderings of one system's pairs.

    Largest pairwise Frobenius distance between the kernels, divided by
    their mean norm.  The first ordering is the identity.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    G, U = record.columns(np.arange(d))
    rng = split_rng(seed, 4, record.system_id)
    orders = [np.arange(d)] + [rng.permutation(d) for _ in range(n_perm - 1)]
    K = model.kernel(np.stack([G[:, o] for o in orders]), np.stack([U[:, o] for o in orders]))
    flat = K.reshape(n_perm, -1)
    mean_norm = float(np.mean(np.linalg.norm(flat, axis=1)))
    if n_perm == 1 or mean_norm == 0:
        return 0.0
    diff = flat[:, None, :] - flat[None, :, :]
    return float(np.max(np.linalg.norm(diff, axis=-1)) / mean_norm)


SWEEP_AXES = ("n_rand", "d_k", "sigma", "resolution")


def sweep(axis: str, values, base_params: dict, train_records, test_records, *,
          d: int, n_rand: int = 25, sigma: float = 0.0, seed: int = 0, csv_path=None,
          log=None):
    """Train once per value (same seeds) and tabulate held-out errors.

    For ``axis="resolution"`` one model is trained on ``train_records`` and
    ``test_records`` maps each grid size to its held-out systems.
    Returns a list of row dicts.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    if axis == "resolution":
        model = _train(base_params, train_records, d, n_rand, sigma, seed)
        for n in values:
            try:
                rep = evaluate(model.at_resolution(n), test_records[n], d)
            except Exception as exc:
                raise SweepError(f"resolution={n}: {exc}") from exc
            rows.append({"value": n, "E_forward": rep.E_forward, "E_inverse": rep.E_inverse,
                         "final_loss": model.report_.final_loss})
    else:
        for v in values:
            params, nr, sg = dict(base_params), n_rand, sigma
            if axis == "n_rand":
                nr = int(v)
            elif axis == "d_k":
                params["d_k"] = int(v)
            else:
                sg = float(v)
            try:
                model = _train(params, train_records, d, nr, sg, seed)
                rep = evaluate(model, test_records, d)
            except Exception as exc:
                raise SweepError(f"{axis}={v}: {exc}") from exc
            rows.append({"value": v, "E_forward": rep.E_forward, "E_inverse": rep.E_inverse,
                         "final_loss": model.report_.final_loss})
            if log:
                log(rows[-1])
    if csv_path is not None:
        write_table(rows, csv_path, ["value", "E_forward", "E_inverse", "final_loss"])
    return rows


def _train(params, records, d, n_rand, sigma, seed) -> NIPSOperator:
    G, U = stack_samples(training_samples(records, d, n_rand, seed, sigma))
    return NIPSOperator(**{**params, "random_state": seed}).fit(G, U)


def write_table(rows, path, columns):
    """CSV with a fixed column order and 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([f"{r[c]:.17g}" if isinstance(r[c], float) else r[c] for c in columns])
