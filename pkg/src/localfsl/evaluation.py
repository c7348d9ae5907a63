"""Episodic evaluation with 95% confidence intervals."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .backbone import BackboneParams, extract_features
from .data import Corpus, sample_episode
from .errors import InvalidConfig, IOFailure
from .metric import MetricConfig, embed, prototype_logits
from .transfer import TransferConfig, refine_map

MODES = ("local", "pooled-baseline")
DEFAULT_QUERIES = 15


@dataclass
class EvalReport:
    per_episode_accuracy: list
    mean: float
    ci95_halfwidth: float
    config: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, accuracies, config=None) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.size == 0:
            raise InvalidConfig("no episodes were evaluated")
        return cls(list(map(float, acc)), float(acc.mean()), confidence_halfwidth(acc), dict(config or {}))

    @property
    def n_episodes(self) -> int:
        return len(self.per_episode_accuracy)

    def summary(self) -> str:
        return (
            f"acc {100 * self.mean:.2f}±{100 * self.ci95_halfwidth:.2f} "
            f"over {self.n_episodes} episodes"
        )

    def write_csv(self, path) -> None:
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(("episode", "accuracy"))
                for i, a in enumerate(self.per_episode_accuracy):
                    writer.writerow((i, repr(a)))
        except OSError as exc:
            raise IOFailure(f"cannot write report {path}: {exc}") from exc


def confidence_halfwidth(accuracies) -> float:
    """``1.96 * std / sqrt(n)`` with the population standard deviation."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size and acc.min() == acc.max():
        return 0.0  # mean rounding would otherwise leave a tiny spread
    return float(1.96 * acc.std() / math.sqrt(acc.size))


def classify_episode(
    support_maps,
    support_labels,
    query_maps,
    way: int,
    metric: MetricConfig,
    mode: str = "local",
    transfer: TransferConfig | None = None,
    classifier=None,
) -> np.ndarray:
    """Predicted local labels of ``query_maps`` against the support prototypes."""
    if mode == "pooled-baseline":
        logits = prototype_logits(support_maps, support_labels, query_maps, way, metric, mode="pooled")
        return logits.data.argmax(axis=1)
    if mode != "local":
        raise InvalidConfig(f"mode must be one of {MODES}")
    if transfer is not None:
        if classifier is None:
            raise InvalidConfig("local transfer needs the classifier weights")
        q = refine_map(query_maps, classifier, transfer)
        if transfer.queries_only:
            s = embed(support_maps).data
        else:
            s = refine_map(support_maps, classifier, transfer)
    else:
        s = embed(support_maps).data
        q = embed(query_maps).data
    logits = prototype_logits(s, support_labels, q, way, metric)
    return logits.data.argmax(axis=1)


def evaluate(
    corpus: Corpus,
    params,
    split: str = "novel",
    way: int = 5,
    shot: int = 1,
    n_episodes: int = 1000,
    metric: MetricConfig | None = None,
    transfer: TransferConfig | None = None,
    mode: str = "local",
    queries: int = DEFAULT_QUERIES,
    seed: int = 0,
    workers: int = 1,
    classifier=None,
) -> EvalReport:
    """Mean accuracy over ``n_episodes`` sampled ``way``-way ``shot``-shot
    episodes.

    ``params`` is a :class:`BackboneParams` or any callable mapping an image
    batch to ``(n, d, w, h)`` feature maps. Feature maps of the split are
    computed once; episode ``i`` is drawn from the seed ``(seed, i)``, so the
    report does not depend on ``workers``.
    """
    metric = metric or MetricConfig()
    if mode not in MODES:
        raise InvalidConfig(f"mode must be one of {MODES}")
    if isinstance(params, BackboneParams):
        if not params.all_finite():
            raise InvalidConfig("parameters contain non-finite values")
        extractor: Callable = lambda imgs: extract_features(params, imgs)
        classifier = params.W if classifier is None else classifier
    elif callable(params):
        extractor = params
    else:
        raise InvalidConfig("params must be BackboneParams or a feature callable")

    members = corpus.split_indices(split)
    lookup = np.full(len(corpus.labels), -1, dtype=np.int64)
    lookup[members] = np.arange(len(members))
    feats = np.asarray(extractor(corpus.images[members]))

    def run(i: int) -> float:
        ep = sample_episode(corpus, split, way, shot, queries, seed=np.random.default_rng([seed, i]))
        pred = classify_episode(
            feats[lookup[ep.support_ids]],
            ep.support_labels,
            feats[lookup[ep.query_ids]],
            way,
            metric,
            mode=mode,
            transfer=transfer,
            classifier=classifier,
        )
        return float(np.mean(pred == ep.query_labels))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run, range(n_episodes)))
    else:
        accs = [run(i) for i in range(n_episodes)]
    echo = {
        "split": split,
        "way": way,
        "shot": shot,
        "episodes": n_episodes,
        "queries": queries,
        "mode": mode,
        "gamma": metric.gamma,
        "softmax_scale": metric.softmax_scale,
        "beta": None if transfer is None else transfer.beta,
        "seed": seed,
    }
    return EvalReport.from_accuracies(accs, echo)
