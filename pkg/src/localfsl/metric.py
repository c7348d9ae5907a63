"""Prototypes, local/matching distances and nearest-prototype prediction.

Single-pair helpers (``local_distance`` ...) take ``d x w x h`` maps and
return floats. The ``*_matrix`` functions work on batches ``(n, d, w, h)``
and accept tape tensors, so the same code path drives training and
inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, ShapeMismatch

MATCHING_NORMS = ("frobenius", "location")


@dataclass(frozen=True)
class MetricConfig:
    gamma: float = 0.6
    softmax_scale: float = 10.0
    matching_norm: str = "frobenius"

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise InvalidConfig(f"gamma must be finite and >= 0, got {self.gamma}")
        if not math.isfinite(self.softmax_scale) or self.softmax_scale <= 0:
            raise InvalidConfig(f"softmax_scale must be > 0, got {self.softmax_scale}")
        if self.matching_norm not in MATCHING_NORMS:
            raise InvalidConfig(f"matching_norm must be one of {MATCHING_NORMS}")


@dataclass
class Prototype:
    values: np.ndarray
    class_index: int

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _maps(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected a d x w x h map, got shape {arr.shape}")
    return arr


def compute_prototypes(supports, num_classes: int) -> list[Prototype]:
    """Class means of ``[(map, label), ...]``; raises EmptyClass on gaps."""
    maps = np.stack([_maps(m) for m, _ in supports])
    labels = np.array([int(y) for _, y in supports])
    means = ad.segment_mean(maps, labels, num_classes).data
    return [Prototype(means[c], c) for c in range(num_classes)]


def normalize_map(x) -> np.ndarray:
    """``x / ||x||_F``; raises ZeroMap below 1e-12."""
    x = _maps(x)
    return ad.frobenius_normalize(x[None]).data[0]


def _locations(t: ad.Tensor) -> ad.Tensor:
    """``(n, d, w, h) -> (n, w*h, d)``, locations in row-major order."""
    n, d, w, h = t.shape
    return ad.reshape(ad.transpose(t, (0, 2, 3, 1)), (n, w * h, d))


def local_distance_matrix(queries, protos) -> ad.Tensor:
    q = ad.frobenius_normalize(queries)
    p = ad.frobenius_normalize(protos)
    n, m = q.shape[0], p.shape[0]
    return ad.pairwise_sqdist(ad.reshape(q, (n, -1)), ad.reshape(p, (m, -1)))


def matching_distance_matrix(queries, protos, matching_norm: str = "frobenius") -> ad.Tensor:
    if matching_norm == "location":
        return ad.matching_distance(
            ad.unit_rows(_locations(ad._lift(queries))), ad.unit_rows(_locations(ad._lift(protos)))
        )
    q = ad.frobenius_normalize(queries)
    p = ad.frobenius_normalize(protos)
    return ad.matching_distance(_locations(q), _locations(p))


def distance_matrix(queries, protos, cfg: MetricConfig) -> ad.Tensor:
    """Combined distance ``d_L + gamma * d_M`` for every (query, prototype)."""
    queries, protos = ad._lift(queries), ad._lift(protos)
    if queries.ndim != 4 or protos.ndim != 4 or queries.shape[1:] != protos.shape[1:]:
        raise ShapeMismatch(f"map shapes {queries.shape} and {protos.shape} differ")
    dl = local_distance_matrix(queries, protos)
    if cfg.gamma == 0:
        return dl
    dm = matching_distance_matrix(queries, protos, cfg.matching_norm)
    return ad.add(dl, ad.scale(dm, cfg.gamma))


def _pair(x, p):
    x, p = _maps(x), _maps(p)
    if x.shape != p.shape:
        raise ShapeMismatch(f"map shapes {x.shape} and {p.shape} differ")
    return x[None], p[None]


def local_distance(x, p) -> float:
    return float(local_distance_matrix(*_pair(x, p)).data[0, 0])


def matching_distance(x, p, matching_norm: str = "frobenius") -> float:
    return float(matching_distance_matrix(*_pair(x, p), matching_norm).data[0, 0])


def combined_distance(x, p, cfg: MetricConfig) -> float:
    return float(distance_matrix(*_pair(x, p), cfg).data[0, 0])


def predict(query, prototypes, cfg: MetricConfig) -> np.ndarray:
    """Softmax over ``-scale * D(query, P_c)`` for the given prototypes."""
    if len(prototypes) < 2:
        raise ShapeMismatch("at least two prototypes are required")
    protos = np.stack([_maps(p) for p in prototypes])
    q = _maps(query)[None]
    dist = distance_matrix(q, protos, cfg).data[0]
    return ad.softmax(-cfg.softmax_scale * dist).data


def embed(maps) -> ad.Tensor:
    """Frobenius-normalise each map before it enters a prototype."""
    return ad.frobenius_normalize(maps)


def prototype_logits(support, labels, queries, num_classes: int, cfg: MetricConfig, mode: str = "local"):
    """Logits ``-s * D(q, P_c)`` of each query against episode prototypes.

    ``mode="local"`` expects already-embedded maps (see :func:`embed`);
    ``mode="pooled"`` pools raw maps and uses squared Euclidean distance
    with unit scale.
    """
    if mode == "pooled":
        sv = ad.global_avg_pool(support)
        qv = ad.global_avg_pool(queries)
        protos = ad.segment_mean(sv, labels, num_classes)
        return ad.scale(ad.pairwise_sqdist(qv, protos), -1.0)
    if mode != "local":
        raise InvalidConfig(f"unknown distance mode {mode!r}")
    protos = ad.segment_mean(support, labels, num_classes)
    return ad.scale(distance_matrix(queries, protos, cfg), -cfg.softmax_scale)
