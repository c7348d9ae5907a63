"""Training losses on last-block feature maps.

All losses are sums over samples (and locations), never means, and every
function accepts tape tensors so the combined objective is differentiable
end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateMap, EmptyClass, InvalidConfig, LabelOutOfRange, ShapeMismatch
from .metric import MetricConfig, distance_matrix, embed, prototype_logits

LAT_MODES = ("off", "cls", "cls+reg")


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.2
    lambda_r: float = 1e-4

    def __post_init__(self):
        for name in ("lambda_s", "lambda_r"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidConfig(f"{name} must be finite and >= 0, got {v}")


def _labels(labels, n: int, upper: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got shape {labels.shape}")
    if upper is not None and (labels.min(initial=0) < 0 or labels.max(initial=0) >= upper):
        raise LabelOutOfRange(f"labels must lie in [0, {upper})")
    return labels


def _cross_entropy_sum(logits: ad.Tensor, labels, axis: int = 1) -> ad.Tensor:
    logp = ad.log_softmax(logits, axis=axis)
    return ad.scale(ad.tsum(ad.pick(logp, labels, axis=axis)), -1.0)


def similarity_loss(maps, labels, cfg: MetricConfig, mode: str = "local", leave_one_out: bool = False):
    """Prototype cross-entropy with the episode serving as its own support.

    ``mode="pooled"`` is the image-level baseline (pooled vectors, squared
    Euclidean distance).
    """
    maps = ad._lift(maps)
    labels = _labels(labels, maps.shape[0])
    classes = np.unique(labels)
    if classes.size < 2:
        raise EmptyClass("similarity loss needs at least two classes")
    num = int(labels.max()) + 1
    if classes.size != num:
        raise EmptyClass("episode labels must cover 0..N-1")
    if mode == "pooled":
        logits = prototype_logits(maps, labels, maps, num, cfg, mode="pooled")
        return _cross_entropy_sum(logits, labels)
    emb = embed(maps)
    logits = prototype_logits(emb, labels, emb, num, cfg)
    if leave_one_out:
        logits = _leave_one_out_logits(emb, labels, num, logits, cfg)
    return _cross_entropy_sum(logits, labels)


def _leave_one_out_logits(emb, labels, num, logits, cfg):
    counts = np.bincount(labels, minlength=num)
    if counts.min() < 2:
        raise EmptyClass("leave-one-out prototypes need two samples per class")
    protos = ad.segment_mean(emb, labels, num)
    k = np.broadcast_to(
        counts[labels].astype(emb.dtype).reshape((-1,) + (1,) * (emb.ndim - 1)), emb.shape
    ).copy()
    # (k * P_y - x) / (k - 1): the class mean without the sample itself
    loo = ad.mul(ad.sub(ad.mul(ad.take_rows(protos, labels), k), emb), 1.0 / (k - 1.0))
    own = ad.pick(distance_matrix(emb, loo, cfg), np.arange(emb.shape[0]), axis=1)
    return ad.replace_at(logits, labels, ad.scale(own, -cfg.softmax_scale))


def local_classification_loss(maps, base_labels, W):
    """Cross-entropy of the 1x1 classifier summed over every location."""
    maps = ad._lift(maps)
    W = ad._lift(W)
    if maps.ndim != 4 or W.ndim != 2 or maps.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"maps {maps.shape} do not match classifier {W.shape}")
    labels = _labels(base_labels, maps.shape[0], W.shape[1])
    return _cross_entropy_sum(ad.conv1x1(maps, W), labels)


def global_classification_loss(maps, base_labels, W):
    """Image-level counterpart: classify the pooled vector once per image."""
    maps = ad._lift(maps)
    W = ad._lift(W)
    if maps.ndim != 4 or maps.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"maps {maps.shape} do not match classifier {W.shape}")
    labels = _labels(base_labels, maps.shape[0], W.shape[1])
    pooled = ad.reshape(ad.global_avg_pool(maps), (maps.shape[0], maps.shape[1], 1, 1))
    return _cross_entropy_sum(ad.conv1x1(pooled, W), labels)


def local_regularization_loss(maps):
    """Sum over samples of the population variance of per-location norms."""
    maps = ad._lift(maps)
    if maps.ndim != 4:
        raise ShapeMismatch(f"expected (n, d, w, h), got {maps.shape}")
    if maps.shape[2] * maps.shape[3] < 2:
        raise DegenerateMap("variance of local norms needs at least two locations")
    norms = ad.l2norm(maps, axis=1)
    return ad.tsum(ad.variance(norms, axis=(1, 2)))


def total_objective(
    maps,
    episode_labels,
    base_labels,
    W,
    cfg: MetricConfig,
    weights: LossWeights,
    lat: str = "cls+reg",
    similarity: str = "local",
    leave_one_out: bool = False,
):
    """``J = L_C + lambda_S * L_S + lambda_R * L_R``.

    ``lat`` selects the classification term: ``"off"`` swaps in the pooled
    image-level loss and drops the regulariser, ``"cls"`` uses per-location
    classification only, ``"cls+reg"`` adds the norm-variance regulariser.
    Returns ``(J, parts)`` where ``parts`` holds the float value of each term.
    """
    if lat not in LAT_MODES:
        raise InvalidConfig(f"lat must be one of {LAT_MODES}")
    maps = ad._lift(maps)
    if lat == "off":
        lc = global_classification_loss(maps, base_labels, W)
    else:
        lc = local_classification_loss(maps, base_labels, W)
    total = lc
    ls = lr = None
    if weights.lambda_s > 0:
        ls = similarity_loss(maps, episode_labels, cfg, mode=similarity, leave_one_out=leave_one_out)
        total = ad.add(total, ad.scale(ls, weights.lambda_s))
    if lat == "cls+reg" and weights.lambda_r > 0:
        lr = local_regularization_loss(maps)
        total = ad.add(total, ad.scale(lr, weights.lambda_r))
    parts = {
        "lc": float(lc.data),
        "ls": float(ls.data) if ls is not None else 0.0,
        "lr_loss": float(lr.data) if lr is not None else 0.0,
        "j": float(total.data),
    }
    return total, parts
