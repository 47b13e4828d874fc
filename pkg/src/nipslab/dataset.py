"""Multi-system Darcy corpus: generation, augmentation, noise and storage.

Container layout (all integers and floats little-endian)::

    b"NIPSDS1\\0" | uint32 header_len | UTF-8 JSON header | float64 blocks

Blocks are row-major; for each system: ``b`` (n*n values), then for each
pair ``g_i`` and ``p_i`` (n*n values each).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .darcy import DarcySystem, SolverError
from .randfield import GrfSpec, binarize_microstructure, sample_grf, split_rng

__all__ = [
    "SystemRecord", "TrainSample", "Corpus", "DatasetFormatError",
    "build_darcy_corpus", "permute_augment", "add_noise", "split_by_system",
    "stack_samples", "save", "load", "write_manifest", "file_sha256",
    "ID_MICRO", "ID_LOAD", "OOD1_LOAD", "OOD2_MICRO",
]

MAGIC = b"NIPSDS1\x00"
FORMAT_VERSION = 1

# covariance exponents of the in-distribution and shifted scenarios
ID_MICRO = dict(tau=5.0, alpha=4.0)
ID_LOAD = dict(tau=5.0, alpha=1.0)
OOD1_LOAD = dict(tau=5.0, alpha=4.0)
OOD2_MICRO = dict(tau=5.0, alpha=1.0)


class DatasetFormatError(ValueError):
    pass


@dataclass
class SystemRecord:
    system_id: int
    b: np.ndarray          # (n, n)
    g: np.ndarray          # (d_pool, n, n)
    p: np.ndarray          # (d_pool, n, n)

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def d_pool(self) -> int:
        return self.g.shape[0]

    def columns(self, idx=None):
        """Loadings and solutions as ``(N, k)`` token-by-instance matrices."""
        idx = np.arange(self.d_pool) if idx is None else np.asarray(idx)
        N = self.n * self.n
        return self.g[idx].reshape(len(idx), N).T, self.p[idx].reshape(len(idx), N).T


@dataclass
class TrainSample:
    system_id: int
    indices: np.ndarray
    G: np.ndarray
    U: np.ndarray
    perm_tag: int = 0


@dataclass
class Corpus:
    records: list
    header: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.records[0].n

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def build_darcy_corpus(n_systems: int, d_pool: int, n: int,
                       micro_spec: GrfSpec | dict | None = None,
                       load_spec: GrfSpec | dict | None = None,
                       seed: int = 0, first_id: int = 0) -> list[SystemRecord]:
    """Sample microstructures and loadings, solve every pair.

    System ``k`` draws from ``split_rng(seed, first_id + k)``: first the
    latent field for ``b``, then ``d_pool`` loadings.
    """
    if n_systems < 1 or d_pool < 1:
        raise ValueError("n_systems and d_pool must be >= 1")
    micro_spec = _as_spec(micro_spec or ID_MICRO, n)
    load_spec = _as_spec(load_spec or ID_LOAD, n)
    out = []
    for k in range(n_systems):
        sid = first_id + k
        rng = split_rng(seed, sid)
        b = binarize_microstructure(sample_grf(micro_spec, rng))
        g = np.stack([sample_grf(load_spec, rng) for _ in range(d_pool)])
        try:
            p = DarcySystem(b).solve(g)
        except SolverError as exc:
            raise SolverError(f"system {sid}: {exc}") from exc
        out.append(SystemRecord(sid, b, g, p))
    return out


def _as_spec(spec, n) -> GrfSpec:
    if isinstance(spec, GrfSpec):
        if spec.n != n:
            raise ValueError(f"spec grid {spec.n} differs from corpus grid {n}")
        return spec
    return GrfSpec(n=n, **spec)


def permute_augment(record: SystemRecord, d: int, n_rand: int,
                    rng: np.random.Generator | None) -> list[TrainSample]:
    """``n_rand`` ordered draws of ``d`` distinct pairs from one system.

    With ``rng=None`` the single sample keeps pool order (first ``d`` pairs).
    """
    if d > record.d_pool:
        raise ValueError(f"d={d} exceeds the pool of {record.d_pool} pairs")
    if d < 1 or n_rand < 1:
        raise ValueError("d and n_rand must be >= 1")
    out = []
    for r in range(n_rand):
        if rng is None:
            idx = np.arange(d)
        else:
            idx = rng.choice(record.d_pool, size=d, replace=False)
        G, U = record.columns(idx)
        out.append(TrainSample(record.system_id, idx, G, U, r))
    return out


def add_noise(g, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``g + eps`` with i.i.d. ``N(0, sigma^2)`` entries."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    g = np.asarray(g, dtype=np.float64)
    if sigma == 0:
        return g.copy()
    return g + sigma * rng.standard_normal(g.shape)


def split_by_system(records, n_test: int):
    """Last ``n_test`` systems are held out."""
    if not 0 < n_test < len(records):
        raise ValueError(f"cannot hold out {n_test} of {len(records)} systems")
    return list(records[:-n_test]), list(records[-n_test:])


def training_samples(records, d: int, n_rand: int, seed: int, noise: float = 0.0):
    """Augmented samples for every record; noise perturbs loadings only."""
    samples = []
    for rec in records:
        rng = split_rng(seed, 1, rec.system_id)
        batch = permute_augment(rec, d, n_rand, rng)
        if noise > 0:
            nrng = split_rng(seed, 2, rec.system_id)
            for s in batch:
                s.G = add_noise(s.G, noise, nrng)
        samples.extend(batch)
    return samples


def stack_samples(samples):
    return np.stack([s.G for s in samples]), np.stack([s.U for s in samples])


# ---------------------------------------------------------------- storage

def save(path, records, header_extra: dict | None = None):
    records = list(records)
    if not records:
        raise ValueError("nothing to save")
    n, d_pool = records[0].n, records[0].d_pool
    for r in records:
        if r.n != n or r.d_pool != d_pool:
            raise ValueError("all systems must share grid and pool size")
    header = {
        "format_version": FORMAT_VERSION,
        "n": n,
        "n_systems": len(records),
        "d_pool": d_pool,
        "system_ids": [int(r.system_id) for r in records],
    }
    if header_extra:
        header.update(header_extra)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for r in records:
            fh.write(np.ascontiguousarray(r.b, dtype="<f8").tobytes())
            for g, p in zip(r.g, r.p):
                fh.write(np.ascontiguousarray(g, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def expected_size(header: dict) -> int:
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    nn = header["n"] ** 2
    per_system = nn * (1 + 2 * header["d_pool"])
    return len(MAGIC) + 4 + len(hb) + 8 * per_system * header["n_systems"]


def load(path) -> Corpus:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise DatasetFormatError(f"bad magic at offset 0 of {path}")
    if len(blob) < 12:
        raise DatasetFormatError("file truncated inside the header length at offset 8")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise DatasetFormatError(f"header runs past end of file at offset {len(blob)}")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable JSON header at offset 12: {exc}") from exc
    for key in ("n", "n_systems", "d_pool", "system_ids"):
        if key not in header:
            raise DatasetFormatError(f"header missing {key!r}")
    if len(header["system_ids"]) != header["n_systems"]:
        raise DatasetFormatError("header n_systems disagrees with system_ids")
    n, d_pool = header["n"], header["d_pool"]
    nn = n * n
    off = 12 + hlen
    expected = off + 8 * nn * (1 + 2 * d_pool) * header["n_systems"]
    if len(blob) < expected:
        raise DatasetFormatError(
            f"data truncated at offset {len(blob)}; header promises {expected} bytes")
    if len(blob) > expected:
        raise DatasetFormatError(
            f"{len(blob) - expected} unexpected bytes after offset {expected}; "
            "header n_systems does not match the stored blocks")
    arr = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    arr = arr.reshape(header["n_systems"], 1 + 2 * d_pool, n, n)
    records = []
    for sid, block in zip(header["system_ids"], arr):
        records.append(SystemRecord(int(sid), block[0].copy(),
                                    block[1::2].copy(), block[2::2].copy()))
    return Corpus(records, header)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(data_path, extra: dict | None = None) -> Path:
    """``<file>.manifest.json`` with the header, size and checksum."""
    data_path = Path(data_path)
    corpus_header = load(data_path).header
    manifest = {
        "file": data_path.name,
        "bytes": data_path.stat().st_size,
        "sha256": file_sha256(data_path),
        "header": corpus_header,
    }
    if extra:
        manifest.update(extra)
    out = data_path.with_name(data_path.name + ".manifest.json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
