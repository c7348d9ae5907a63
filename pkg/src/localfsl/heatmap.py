"""Per-location feature-norm maps written as PGM and CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .backbone import BackboneParams, forward_features
from .data import quantize, write_pgm
from .errors import IOFailure


def location_norms(fmap) -> np.ndarray:
    """``w x h`` grid of L2 norms over the channel axis."""
    x = np.asarray(fmap, dtype=np.float64)
    return np.sqrt((x * x).sum(axis=0))


def min_max_scale(grid: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant grid maps to all zeros."""
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def export_heatmap(params: BackboneParams, image, out_path) -> tuple[Path, Path]:
    """Write ``<stem>.pgm`` (scaled) and ``<stem>.csv`` (raw norms)."""
    norms = location_norms(forward_features(params, image).values)
    return write_heatmap(norms, out_path)


def write_heatmap(norms: np.ndarray, out_path) -> tuple[Path, Path]:
    out = Path(out_path)
    pgm, table = out.with_suffix(".pgm"), out.with_suffix(".csv")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(pgm, quantize(min_max_scale(norms)))
        with open(table, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in norms:
                writer.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise IOFailure(f"cannot write heatmap {out}: {exc}") from exc
    return pgm, table
