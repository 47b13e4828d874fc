"""Grayscale heatmaps: binary PGM for exact comparison, SVG for viewing."""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["to_gray", "write_pgm", "read_pgm", "write_svg", "write_panels"]


def to_gray(field, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map a 2-D field linearly onto 0..255 (``vmin`` black, ``vmax`` white)."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"heatmaps need a 2-D field, got shape {f.shape}")
    lo = float(f.min()) if vmin is None else float(vmin)
    hi = float(f.max()) if vmax is None else float(vmax)
    if hi <= lo:
        return np.zeros(f.shape, dtype=np.uint8)
    scaled = np.clip((f - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(scaled * 255).astype(np.uint8)


def write_pgm(path, field, vmin=None, vmax=None) -> Path:
    gray = to_gray(field, vmin, vmax)
    path = Path(path)
    rows, cols = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    cols, rows = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def write_svg(path, field, vmin=None, vmax=None, cell: int = 16, title: str | None = None) -> Path:
    gray = to_gray(field, vmin, vmax)
    rows, cols = gray.shape
    top = 20 if title else 0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" '
           f'height="{rows * cell + top}" shape-rendering="crispEdges">']
    if title:
        out.append(f'<text x="2" y="14" font-family="sans-serif" font-size="12">{title}</text>')
    for i in range(rows):
        for j in range(cols):
            v = int(gray[i, j])
            out.append(f'<rect x="{j * cell}" y="{i * cell + top}" width="{cell}" '
                       f'height="{cell}" fill="rgb({v},{v},{v})"/>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def write_panels(outdir, panels: dict, ranges: dict | None = None) -> list[Path]:
    """One PGM and one SVG per named field."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ranges = ranges or {}
    written = []
    for name, field in panels.items():
        lo, hi = ranges.get(name, (None, None))
        written.append(write_pgm(outdir / f"{name}.pgm", field, lo, hi))
        written.append(write_svg(outdir / f"{name}.svg", field, lo, hi, title=name))
    return written
