"""Episodic SGD training and the optional batch pre-training phase."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import DESK_ARCH, Arch, BackboneParams, buffer_names, forward, init_params, learnable_names
from .data import Corpus, augment_batch, sample_episode
from .errors import DivergedLoss, InvalidConfig, IOFailure, NonFinite, ZeroMap
from .losses import LAT_MODES, LossWeights, local_classification_loss, total_objective
from .metric import MetricConfig

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e8
LOG_FIELDS = ("episode", "lc", "ls", "lr_loss", "j", "learning_rate")


def _check_schedule(schedule) -> tuple:
    schedule = tuple((int(i), float(lr)) for i, lr in schedule)
    if not schedule or schedule[0][0] != 0:
        raise InvalidConfig("learning-rate schedule must start at episode 0")
    idx = [i for i, _ in schedule]
    if idx != sorted(idx) or len(set(idx)) != len(idx):
        raise InvalidConfig("schedule indices must be strictly ascending")
    if any(lr < 0 or not math.isfinite(lr) for _, lr in schedule):
        raise InvalidConfig("learning rates must be finite and non-negative")
    return schedule


def lr_at(schedule, step: int) -> float:
    """Piecewise-constant learning rate: the last entry at or before ``step``."""
    lr = schedule[0][1]
    for start, value in schedule:
        if step >= start:
            lr = value
    return lr


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    lr_schedule: tuple = ((0, 0.0005), (1200, 0.00005), (1800, 0.000005))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    metric: MetricConfig = field(default_factory=MetricConfig)
    way: int = 5
    shot: int = 5
    seed: int = 0
    lat: str = "cls+reg"
    similarity: str = "local"
    leave_one_out: bool = False
    augment: bool = True
    bn_momentum: float = 0.1
    pretrain_batches: int = 0
    pretrain_batch_size: int = 64
    pretrain_schedule: tuple = ((0, 0.05),)
    arch: Arch = DESK_ARCH
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", _check_schedule(self.lr_schedule))
        object.__setattr__(self, "pretrain_schedule", _check_schedule(self.pretrain_schedule))
        if self.episodes < 0 or self.pretrain_batches < 0:
            raise InvalidConfig("episode and batch counts must be >= 0")
        if self.lat not in LAT_MODES:
            raise InvalidConfig(f"lat must be one of {LAT_MODES}")
        if self.similarity not in ("local", "pooled"):
            raise InvalidConfig("similarity must be 'local' or 'pooled'")
        if self.way < 2 or self.shot < 1:
            raise InvalidConfig("training episodes need way >= 2 and shot >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidConfig("momentum must be in [0, 1), weight_decay >= 0")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")


# Reference schedules. Full-scale runs are out of reach on a CPU; the presets
# pin the published hyper-parameters for documentation and scaled-down use.
PRESETS = {
    "desk": {},
    "paper-mini": {
        "episodes": 50000,
        "lr_schedule": ((0, 0.1), (30000, 0.006), (45000, 0.0012)),
        "way": 15,
        "shot": 9,
        "weights": LossWeights(0.2, 1e-4),
        "gamma": 0.6,
        "beta": 0.8,
    },
    "paper-tiered": {
        "episodes": 50000,
        "lr_schedule": ((0, 0.01), (20000, 0.001), (40000, 0.0001)),
        "pretrain_batches": 50000,
        "pretrain_schedule": ((0, 0.1), (20000, 0.01), (40000, 0.001)),
        "way": 15,
        "shot": 9,
        "weights": LossWeights(0.2, 1e-4),
        "gamma": 0.4,
        "beta": 0.9,
    },
    "paper-cifar": {
        "episodes": 50000,
        "lr_schedule": ((0, 0.1), (30000, 0.006), (45000, 0.0012)),
        "way": 15,
        "shot": 9,
        "weights": LossWeights(0.2, 1e-4),
        "gamma": 0.2,
        "beta": 0.5,
    },
}


def preset_config(name: str, **overrides) -> TrainConfig:
    """A :class:`TrainConfig` carrying a named preset's values."""
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    gamma = values.pop("gamma", None)
    values.pop("beta", None)
    cfg = TrainConfig(**values)
    if gamma is not None:
        cfg = replace(cfg, metric=replace(cfg.metric, gamma=gamma))
    return replace(cfg, **overrides)


class SGD:
    """Momentum SGD; L2 weight decay is folded into the gradient."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: BackboneParams, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            p = params.tensors[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params.tensors[name] = (p - lr * v).astype(p.dtype)


def _update_running(params: BackboneParams, stats, momentum: float) -> None:
    for b, (mu, var) in enumerate(stats):
        rm, rv = f"block{b}.running_mean", f"block{b}.running_var"
        dtype = params.tensors[rm].dtype
        params.tensors[rm] = ((1 - momentum) * params.tensors[rm] + momentum * mu).astype(dtype)
        params.tensors[rv] = ((1 - momentum) * params.tensors[rv] + momentum * var).astype(dtype)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergedLoss(f"objective diverged ({value!r}) at {where}")


def _base_index(corpus: Corpus) -> np.ndarray:
    """Global class id -> index among base classes (``-1`` elsewhere)."""
    lookup = np.full(corpus.num_classes, -1, dtype=np.int64)
    base = corpus.classes_in("base")
    lookup[base] = np.arange(len(base))
    return lookup


def gradient_step(params: BackboneParams, images, objective, bn_momentum: float):
    """Forward ``images`` in training mode, evaluate ``objective(maps, W)``
    and return ``(value, parts, grads)``; running statistics are updated."""
    tape = ad.Tape()
    leaves = {n: tape.watch(params.tensors[n], name=n) for n in learnable_names(params.arch)}
    buffers = {n: params.tensors[n] for n in buffer_names(params.arch)}
    maps, stats = forward(leaves, buffers, images.astype(params.W.dtype, copy=False), train=True)
    try:
        loss, parts = objective(maps, leaves["classifier.W"])
    except (ZeroMap, NonFinite) as exc:
        # collapsed or overflowing features only arise from a runaway step
        raise DivergedLoss(f"training collapsed: {exc}") from exc
    _check_finite(float(loss.data), "forward pass")
    grads = ad.backward(tape, loss)
    _update_running(params, stats, bn_momentum)
    return float(loss.data), parts, grads


def pretrain(corpus: Corpus, params: BackboneParams, config: TrainConfig, log: list | None = None) -> BackboneParams:
    """Batch training on base images with the per-location classification
    loss only. Returns ``params`` untouched when ``pretrain_batches == 0``."""
    if config.pretrain_batches == 0:
        return params
    params = params.copy()
    lookup = _base_index(corpus)
    pool = corpus.split_indices("base")
    rng = np.random.default_rng([config.seed, 1])
    opt = SGD(config.momentum, config.weight_decay)

    def objective(maps, W):
        lc = local_classification_loss(maps, base_labels, W)
        return lc, {"lc": float(lc.data), "ls": 0.0, "lr_loss": 0.0, "j": float(lc.data)}

    for step in range(config.pretrain_batches):
        idx = rng.choice(pool, size=min(config.pretrain_batch_size, len(pool)), replace=False)
        images = corpus.images[idx]
        if config.augment:
            images = augment_batch(images, rng)
        base_labels = lookup[corpus.labels[idx]]
        lr = lr_at(config.pretrain_schedule, step)
        _, parts, grads = gradient_step(params, images, objective, config.bn_momentum)
        opt.step(params, grads, lr)
        if log is not None:
            log.append({"episode": step, **parts, "learning_rate": lr})
    return params


def train(corpus: Corpus, config: TrainConfig, params: BackboneParams | None = None):
    """Episodic training of the full objective. Returns ``(params, log)``
    where ``log`` holds one record per episode (pre-training excluded)."""
    if len(corpus.classes_in("base")) < config.way:
        raise InvalidConfig("base split has fewer classes than the training way")
    dtype = np.float32 if config.dtype == "float32" else np.float64
    if params is None:
        arch = replace(
            config.arch,
            in_channels=corpus.channels,
            side=corpus.side,
            num_classes=len(corpus.classes_in("base")),
        )
        params = init_params(arch, seed=config.seed, dtype=dtype)
    params = pretrain(corpus, params, config)
    params = params.copy()
    lookup = _base_index(corpus)
    rng = np.random.default_rng([config.seed, 2])
    opt = SGD(config.momentum, config.weight_decay)
    log = []
    for step in range(config.episodes):
        ep = sample_episode(corpus, "base", config.way, config.shot, queries=0, seed=rng)
        images = ep.support_images
        if config.augment:
            images = augment_batch(images, rng)
        base_labels = lookup[ep.classes[ep.support_labels]]

        def objective(maps, W):
            return total_objective(
                maps,
                ep.support_labels,
                base_labels,
                W,
                config.metric,
                config.weights,
                lat=config.lat,
                similarity=config.similarity,
                leave_one_out=config.leave_one_out,
            )

        lr = lr_at(config.lr_schedule, step)
        _, parts, grads = gradient_step(params, images, objective, config.bn_momentum)
        opt.step(params, grads, lr)
        if not params.all_finite():
            raise DivergedLoss(f"parameters became non-finite at episode {step}")
        log.append({"episode": step, **parts, "learning_rate": lr})
        if step % 200 == 0:
            logger.info("episode %d  J=%.4f  lc=%.4f  ls=%.4f", step, parts["j"], parts["lc"], parts["ls"])
    return params, log


def write_training_log(log: list, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_FIELDS)
            for rec in log:
                writer.writerow([rec["episode"]] + [repr(float(rec[k])) for k in LOG_FIELDS[1:]])
    except OSError as exc:
        raise IOFailure(f"cannot write training log {path}: {exc}") from exc


def read_training_log(path) -> list:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return [
            {k: (int(v) if k == "episode" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
