"""Flat ``key = value`` run configuration with per-key provenance.

Resolution order, lowest first: built-in default, preset, config file,
``LLS_SEED`` environment variable (seed only), command-line flag.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .errors import InvalidConfig, IOFailure
from .evaluation import MODES
from .losses import LAT_MODES, LossWeights
from .metric import MATCHING_NORMS, MetricConfig
from .training import PRESETS, TrainConfig
from .transfer import TransferConfig

ENV_SEED = "LLS_SEED"


def _schedule(text: str) -> tuple:
    """``"0:0.05,1200:0.005"`` -> ``((0, 0.05), (1200, 0.005))``."""
    try:
        pairs = [item.split(":") for item in text.replace(" ", "").split(",") if item]
        return tuple((int(i), float(lr)) for i, lr in pairs)
    except ValueError as exc:
        raise InvalidConfig(f"bad schedule {text!r}; expected 'episode:lr,...'") from exc


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"expected a boolean, got {text!r}")


def _choice(*options) -> Callable:
    def parse(text: str) -> str:
        if text not in options:
            raise InvalidConfig(f"expected one of {options}, got {text!r}")
        return text

    return parse


def _bounded(kind, lo=None, hi=None, finite=True) -> Callable:
    def parse(text) -> float:
        try:
            v = kind(text)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"expected {kind.__name__}, got {text!r}") from exc
        if finite and kind is float and not math.isfinite(v):
            raise InvalidConfig(f"expected a finite number, got {text!r}")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise InvalidConfig(f"{v} outside [{lo}, {hi}]")
        return v

    return parse


@dataclass(frozen=True)
class Option:
    parse: Callable
    default: object
    help: str


SCHEMA = {
    "seed": Option(_bounded(int, 0), 0, "master seed for data, training and evaluation"),
    "preset": Option(_choice(*PRESETS), "desk", "named hyper-parameter preset"),
    "base": Option(_bounded(int, 1), 20, "generated base classes"),
    "val": Option(_bounded(int, 1), 5, "generated validation classes"),
    "novel": Option(_bounded(int, 1), 10, "generated novel classes"),
    "per_class": Option(_bounded(int, 1), 40, "generated images per class"),
    "side": Option(_bounded(int, 16), 32, "generated image side (multiple of 16)"),
    "train_episodes": Option(_bounded(int, 0), 2000, "episodic training steps"),
    "lr_schedule": Option(_schedule, ((0, 0.0005), (1200, 0.00005), (1800, 0.000005)), "episode:lr pairs"),
    "momentum": Option(_bounded(float, 0, 0.999), 0.9, "SGD momentum"),
    "weight_decay": Option(_bounded(float, 0), 5e-4, "L2 weight decay"),
    "train_way": Option(_bounded(int, 2), 5, "classes per training episode"),
    "train_shot": Option(_bounded(int, 1), 5, "images per class in a training episode"),
    "lambda_s": Option(_bounded(float, 0), 0.2, "weight of the similarity loss"),
    "lambda_r": Option(_bounded(float, 0), 1e-4, "weight of the norm-variance regulariser"),
    "lat": Option(_choice(*LAT_MODES), "cls+reg", "local training: off, cls or cls+reg"),
    "similarity": Option(_choice("local", "pooled"), "local", "distance used by the training similarity loss"),
    "augment": Option(_bool, True, "random flip and padded crop during training"),
    "pretrain_batches": Option(_bounded(int, 0), 0, "batch pre-training steps (0 disables)"),
    "gamma": Option(_bounded(float, 0), 0.6, "weight of the matching distance"),
    "beta": Option(_bounded(float, 0, 1), 1.0, "own-feature share of the transfer blend (1 disables)"),
    "softmax_scale": Option(_bounded(float, 1e-12), 10.0, "inverse temperature of the prototype softmax"),
    "matching_norm": Option(_choice(*MATCHING_NORMS), "frobenius", "normalisation inside the matching distance"),
    "mode": Option(_choice(*MODES), "local", "evaluation distance path"),
    "split": Option(_choice("base", "val", "novel"), "novel", "evaluation split"),
    "way": Option(_bounded(int, 2), 5, "classes per evaluation episode"),
    "shot": Option(_bounded(int, 1), 1, "support images per class"),
    "queries": Option(_bounded(int, 1), 15, "query images per class"),
    "episodes": Option(_bounded(int, 1), 1000, "evaluation episodes"),
    "workers": Option(_bounded(int, 1, 256), 1, "evaluation threads"),
}

# preset values that map onto schema keys
_PRESET_KEYS = {
    "episodes": "train_episodes",
    "lr_schedule": "lr_schedule",
    "way": "train_way",
    "shot": "train_shot",
    "gamma": "gamma",
    "beta": "beta",
    "pretrain_batches": "pretrain_batches",
}


@dataclass
class ResolvedConfig:
    values: dict
    provenance: dict

    def __getitem__(self, key):
        return self.values[key]

    def describe(self) -> str:
        width = max(map(len, self.values))
        lines = [f"{k:<{width}} = {_show(v)}  [{self.provenance[k]}]" for k, v in sorted(self.values.items())]
        return "\n".join(lines)

    def train_config(self) -> TrainConfig:
        v = self.values
        base = TrainConfig(lr_schedule=v["lr_schedule"])
        if v["preset"] != "desk":
            extra = {k: val for k, val in PRESETS[v["preset"]].items() if k not in _PRESET_KEYS and k != "weights"}
            base = replace(base, **extra)
        return replace(
            base,
            episodes=v["train_episodes"],
            momentum=v["momentum"],
            weight_decay=v["weight_decay"],
            weights=LossWeights(v["lambda_s"], v["lambda_r"]),
            metric=self.metric_config(),
            way=v["train_way"],
            shot=v["train_shot"],
            seed=v["seed"],
            lat=v["lat"],
            similarity=v["similarity"],
            augment=v["augment"],
            pretrain_batches=v["pretrain_batches"],
        )

    def metric_config(self) -> MetricConfig:
        v = self.values
        return MetricConfig(gamma=v["gamma"], softmax_scale=v["softmax_scale"], matching_norm=v["matching_norm"])

    def transfer_config(self) -> TransferConfig | None:
        return None if self.values["beta"] == 1.0 else TransferConfig(self.values["beta"])


def _show(v) -> str:
    if isinstance(v, tuple):
        return ",".join(f"{i}:{lr}" for i, lr in v)
    return str(v)


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise InvalidConfig(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(file_values: dict | None = None, flags: dict | None = None, env=None) -> ResolvedConfig:
    """Merge every layer and validate each value before any work starts."""
    env = os.environ if env is None else env
    values = {k: opt.default for k, opt in SCHEMA.items()}
    provenance = dict.fromkeys(SCHEMA, "default")
    layers = [("file", file_values or {})]
    if env.get(ENV_SEED) is not None:
        layers.append(("env", {"seed": env[ENV_SEED]}))
    layers.append(("flag", {k: v for k, v in (flags or {}).items() if v is not None}))

    def apply(source, items):
        for key, raw in items.items():
            if key not in SCHEMA:
                raise InvalidConfig(f"unknown config key {key!r}")
            values[key] = SCHEMA[key].parse(raw) if isinstance(raw, str) else _check(key, raw)
            provenance[key] = source

    # the preset must be known before the layers that may override its values
    preset = "desk"
    for _, items in layers:
        preset = items.get("preset", preset)
    preset = SCHEMA["preset"].parse(preset)
    for key, target in _PRESET_KEYS.items():
        if key in PRESETS[preset]:
            values[target] = PRESETS[preset][key]
            provenance[target] = f"preset:{preset}"
    for source, items in layers:
        apply(source, items)
    return ResolvedConfig(values, provenance)


def _check(key, value):
    if isinstance(value, tuple):
        return value
    return SCHEMA[key].parse(str(value))
