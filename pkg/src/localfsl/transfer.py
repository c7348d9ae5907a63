"""Inference-time blending of feature maps with classifier-weight knowledge."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import BackboneParams, local_classify
from .errors import InvalidConfig, ShapeMismatch


@dataclass(frozen=True)
class TransferConfig:
    beta: float = 0.8
    queries_only: bool = False

    def __post_init__(self):
        if not math.isfinite(self.beta) or not 0.0 <= self.beta <= 1.0:
            raise InvalidConfig(f"beta must lie in [0, 1], got {self.beta}")


def _weights(params) -> np.ndarray:
    return params.W if isinstance(params, BackboneParams) else np.asarray(params)


def base_similar_map(fmap, params) -> np.ndarray:
    """Replace every local feature by the probability-weighted sum of the
    classifier columns ``W[:, l]``. Accepts one map or a batch."""
    W = _weights(params)
    x = np.asarray(fmap)
    if x.ndim not in (3, 4) or x.shape[-3] != W.shape[0]:
        raise ShapeMismatch(f"map {x.shape} does not match classifier {W.shape}")
    probs = local_classify(W, x)
    # sum_l p_l W[:, l] at each location
    return np.moveaxis(np.tensordot(probs, W, axes=([-3], [1])), -1, -3)


def refine_map(fmap, params, cfg: TransferConfig) -> np.ndarray:
    """``beta * N(x) + (1 - beta) * N(base_similar_map(x))`` per map."""
    x = np.asarray(fmap)
    single = x.ndim == 3
    batch = x[None] if single else x
    similar = base_similar_map(batch, params)
    own = ad.frobenius_normalize(batch).data
    other = ad.frobenius_normalize(similar).data
    out = cfg.beta * own + (1.0 - cfg.beta) * other
    return out[0] if single else out
