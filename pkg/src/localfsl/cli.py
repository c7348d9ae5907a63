"""Command-line entry point: gen-data, train, eval, ablate, heatmap.

Exit codes: 0 success, 2 configuration error, 3 file error, 4 diverged.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .ablation import AblationConfig, run_ablation, train_checkpoints, write_ablation_csv
from .backbone import load_checkpoint, save_checkpoint
from .data import generate_glyph_corpus, load_corpus, read_pgm, write_corpus
from .errors import CorruptImage, DivergedLoss, InvalidConfig, IOFailure, MissingManifest, SplitOverlap
from .evaluation import evaluate
from .heatmap import export_heatmap
from .training import train, write_training_log

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

# schema keys exposed as flags on each command
COMMAND_KEYS = {
    "gen-data": ("seed", "base", "val", "novel", "per_class", "side"),
    "train": (
        "seed", "preset", "train_episodes", "lr_schedule", "momentum", "weight_decay", "train_way",
        "train_shot", "lambda_s", "lambda_r", "lat", "similarity", "augment", "pretrain_batches",
        "gamma", "softmax_scale", "matching_norm",
    ),
    "eval": (
        "seed", "preset", "gamma", "beta", "softmax_scale", "matching_norm", "mode", "split", "way",
        "shot", "queries", "episodes", "workers",
    ),
    "ablate": (
        "seed", "preset", "train_episodes", "lr_schedule", "momentum", "weight_decay", "train_way",
        "train_shot", "lambda_s", "lambda_r", "augment", "pretrain_batches", "gamma", "beta",
        "softmax_scale", "matching_norm", "split", "way", "queries", "episodes", "workers",
    ),
    "heatmap": ("seed",),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidConfig(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="localfsl", description="Few-shot classification with local-level strategies.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cmds = {
        "gen-data": sub.add_parser("gen-data", help="write a synthetic glyph corpus"),
        "train": sub.add_parser("train", help="train a checkpoint"),
        "eval": sub.add_parser("eval", help="episodic evaluation of a checkpoint"),
        "ablate": sub.add_parser("ablate", help="train and evaluate the six-row ladder"),
        "heatmap": sub.add_parser("heatmap", help="export per-location feature norms of one image"),
    }
    cmds["gen-data"].add_argument("--out", required=True, help="output directory")
    cmds["train"].add_argument("--data", required=True, help="corpus directory")
    cmds["train"].add_argument("--out", required=True, help="checkpoint path")
    cmds["train"].add_argument("--log", help="training log CSV path")
    cmds["eval"].add_argument("--ckpt", required=True, help="checkpoint path")
    cmds["eval"].add_argument("--data", required=True, help="corpus directory")
    cmds["eval"].add_argument("--report", help="per-episode accuracy CSV path")
    cmds["ablate"].add_argument("--data", required=True, help="corpus directory")
    cmds["ablate"].add_argument("--out", required=True, help="ladder CSV path")
    cmds["ablate"].add_argument("--ckpt-dir", help="also save the three checkpoints here")
    cmds["heatmap"].add_argument("--ckpt", required=True, help="checkpoint path")
    cmds["heatmap"].add_argument("--image", required=True, help="PGM image")
    cmds["heatmap"].add_argument("--out", required=True, help="output stem (.pgm and .csv are added)")
    for name, p in cmds.items():
        p.add_argument("--config", help="flat key = value config file")
        for key in COMMAND_KEYS[name]:
            p.add_argument("--" + key.replace("_", "-"), dest=key, help=cfgmod.SCHEMA[key].help)
    return parser


def _resolve(args) -> cfgmod.ResolvedConfig:
    file_values = cfgmod.parse_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in COMMAND_KEYS[args.command]}
    resolved = cfgmod.resolve(file_values, flags)
    print("# resolved configuration")
    print(resolved.describe())
    sys.stdout.flush()
    return resolved


def _require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise IOFailure(f"corpus directory {p} does not exist")
    return p


def cmd_gen_data(args, rc: cfgmod.ResolvedConfig) -> int:
    corpus = generate_glyph_corpus(
        num_base=rc["base"], num_val=rc["val"], num_novel=rc["novel"],
        per_class=rc["per_class"], side=rc["side"], seed=rc["seed"],
    )
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {args.out}: {exc}") from exc
    files = write_corpus(corpus, args.out)
    counts = {s: len(corpus.classes_in(s)) for s in ("base", "val", "novel")}
    print(f"wrote {len(files)} images in {corpus.num_classes} classes {counts} to {args.out}")
    return EXIT_OK


def cmd_train(args, rc: cfgmod.ResolvedConfig) -> int:
    corpus = load_corpus(_require_dir(args.data))
    params, log = train(corpus, rc.train_config())
    save_checkpoint(params, args.out)
    if args.log:
        write_training_log(log, args.log)
    if log:
        print(f"trained {len(log)} episodes, final J {log[-1]['j']:.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args, rc: cfgmod.ResolvedConfig) -> int:
    params = load_checkpoint(args.ckpt, dtype=np.float64)
    corpus = load_corpus(_require_dir(args.data))
    report = evaluate(
        corpus, params, split=rc["split"], way=rc["way"], shot=rc["shot"], n_episodes=rc["episodes"],
        metric=rc.metric_config(), transfer=rc.transfer_config(), mode=rc["mode"],
        queries=rc["queries"], seed=rc["seed"], workers=rc["workers"],
    )
    print(report.summary())
    if args.report:
        report.write_csv(args.report)
    return EXIT_OK


def cmd_ablate(args, rc: cfgmod.ResolvedConfig) -> int:
    corpus = load_corpus(_require_dir(args.data))
    # beta defaults to 1 (no transfer) for eval; the ladder needs a blend
    beta = rc["beta"] if rc.provenance["beta"] != "default" else AblationConfig.beta
    config = AblationConfig(
        train=rc.train_config(), gamma=rc["gamma"], beta=beta, episodes=rc["episodes"],
        way=rc["way"], split=rc["split"], seed=rc["seed"], workers=rc["workers"],
    )
    checkpoints = train_checkpoints(corpus, config)
    if args.ckpt_dir:
        Path(args.ckpt_dir).mkdir(parents=True, exist_ok=True)
        for lat, params in checkpoints.items():
            save_checkpoint(params, Path(args.ckpt_dir) / f"lat-{lat.replace('+', '-')}.lls")
    rows = run_ablation(corpus, config, checkpoints)
    write_ablation_csv(rows, args.out)
    for r in rows:
        print(
            f"{r['lat']:>8} {r['lsm']:>8} {r['lkt']:>4}  "
            f"1-shot {100 * r['acc_1shot']:.2f}±{100 * r['ci_1shot']:.2f}  "
            f"5-shot {100 * r['acc_5shot']:.2f}±{100 * r['ci_5shot']:.2f}"
        )
    return EXIT_OK


def cmd_heatmap(args, rc: cfgmod.ResolvedConfig) -> int:
    params = load_checkpoint(args.ckpt, dtype=np.float64)
    image = read_pgm(args.image).astype(np.float64)[None] / 255.0
    pgm, table = export_heatmap(params, image, args.out)
    print(f"wrote {pgm} and {table}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "heatmap": cmd_heatmap,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        rc = _resolve(args)
        return COMMANDS[args.command](args, rc)
    except (InvalidConfig, SplitOverlap) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IOFailure, MissingManifest, CorruptImage, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
