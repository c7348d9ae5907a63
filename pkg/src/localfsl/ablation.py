"""Six-row ladder of the local-level strategies.

One checkpoint is trained per local-training setting; the similarity and
transfer variants are inference-time and reuse the strongest checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

from .data import Corpus
from .errors import IOFailure
from .evaluation import evaluate
from .metric import MetricConfig
from .training import TrainConfig, train
from .transfer import TransferConfig

ROW_FIELDS = ("lat", "lsm", "lkt", "acc_1shot", "ci_1shot", "acc_5shot", "ci_5shot")

# (lat, lsm, lkt, checkpoint, eval mode, use gamma, use transfer)
LADDER = (
    ("off", "off", "off", "off", "pooled-baseline", False, False),
    ("cls", "off", "off", "cls", "pooled-baseline", False, False),
    ("cls+reg", "off", "off", "cls+reg", "pooled-baseline", False, False),
    ("cls+reg", "loc", "off", "cls+reg", "local", False, False),
    ("cls+reg", "loc+mat", "off", "cls+reg", "local", True, False),
    ("cls+reg", "loc+mat", "on", "cls+reg", "local", True, True),
)


@dataclass(frozen=True)
class AblationConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    gamma: float = 0.6
    beta: float = 0.8
    episodes: int = 1000
    shots: tuple = (1, 5)
    way: int = 5
    split: str = "novel"
    seed: int = 0
    workers: int = 1


def train_checkpoints(corpus: Corpus, config: AblationConfig) -> dict:
    """One model per local-training setting. Without local training the
    similarity term also uses pooled vectors, as in the plain baseline."""
    out = {}
    for lat in ("off", "cls", "cls+reg"):
        similarity = "pooled" if lat == "off" else "local"
        params, _ = train(corpus, replace(config.train, lat=lat, similarity=similarity))
        out[lat] = params
    return out


def run_ablation(corpus: Corpus, config: AblationConfig, checkpoints: dict | None = None) -> list[dict]:
    checkpoints = checkpoints or train_checkpoints(corpus, config)
    rows = []
    for lat, lsm, lkt, ckpt, mode, use_gamma, use_transfer in LADDER:
        metric = replace(config.train.metric, gamma=config.gamma if use_gamma else 0.0)
        transfer = TransferConfig(config.beta) if use_transfer else None
        row = {"lat": lat, "lsm": lsm, "lkt": lkt}
        for shot in config.shots:
            report = evaluate(
                corpus,
                checkpoints[ckpt],
                split=config.split,
                way=config.way,
                shot=shot,
                n_episodes=config.episodes,
                metric=metric,
                transfer=transfer,
                mode=mode,
                seed=config.seed,
                workers=config.workers,
            )
            row[f"acc_{shot}shot"] = report.mean
            row[f"ci_{shot}shot"] = report.ci95_halfwidth
        rows.append(row)
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    fields = list(ROW_FIELDS)
    for row in rows:
        fields += [k for k in row if k not in fields]
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(fields)
            for row in rows:
                writer.writerow([_cell(row.get(k, "")) for k in fields])
    except OSError as exc:
        raise IOFailure(f"cannot write ablation table {path}: {exc}") from exc


def _cell(v):
    return repr(v) if isinstance(v, float) else v
