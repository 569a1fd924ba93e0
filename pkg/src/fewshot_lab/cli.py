"""Command-line front end: synth, train, distill, extract, eval, ablate.

Every subcommand reads an optional JSON config whose sections mirror the
library configs. Precedence, lowest first: built-in defaults, config file,
the FSB_SEED environment variable (global seed only), dotted flag overrides
such as ``--train.lr 0.01`` or ``--seed 3``.

Exit codes: 0 success, 1 usage or validation, 2 I/O or file format,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselearners import BaseLearnerConfig
from .datasets import (FormatError, LabeledVectorDataset, MetaSplit, SyntheticSpec, generate_synthetic,
                       load_dataset, make_meta_split, merge_meta_train, read_labeled_vectors,
                       save_dataset, write_labeled_vectors)
from .distillation import DistillConfig, sequential_distill, write_manifest
from .embedder import (DivergedTrainingError, EmbeddingModel, MlpConfig, TrainConfig, features,
                       init_model, load_model, save_model, train_classifier, train_multitask)
from .episodes import EpisodeSpec
from .evaluation import (EvalConfig, ablation_grid, ablation_table_dict, evaluate, ablation_rows,
                         val_scorer)
from .numerics import InvalidInputError, derive_seed

log = logging.getLogger("fewshot_lab")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "FSB_SEED"
CACHE_MAGIC = b"FSE1"

# Section seeds left as null are derived from the global seed and the section name.
DEFAULTS = {
    "seed": 0,
    "synthetic": {"num_classes": 100, "dim": 32, "samples_per_class": 60,
                  "between_class_sigma": 1.0, "within_class_sigma": 1.25, "seed": None},
    "split": {"fractions": [0.64, 0.16, 0.20], "seed": None},
    "model": {"hidden_widths": [128, 64], "seed": None},
    "train": {"lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 64, "epochs": 100,
              "decay_epochs": [60, 80], "decay_factor": 0.1, "seed": None},
    "distill": {"alpha": 0.5, "beta": 0.5, "temperature": 4.0, "generations": 2,
                "kl_direction": "teacher||student", "seed": None},
    "episode": {"n_way": 5, "k_shot": 1, "q_queries": 15},
    "learner": {"kind": "logistic-regression", "normalize": False, "augment_copies": 0,
                "augment_sigma_scale": 0.1, "lambda": 1.0, "solver_tol": 1e-6,
                "solver_max_iters": 1000, "regularize_bias": False},
    "eval": {"episodes_per_run": 1000, "runs": 3, "split": "test", "workers": 1,
             "val_episodes": 600, "seed": None},
    "ablate": {"augment_copies": 5, "shots": [1, 5]},
}
SEEDED_SECTIONS = ("synthetic", "split", "model", "train", "distill", "eval")


class ConfigError(InvalidInputError):
    pass


# --------------------------------------------------------------------------
# config resolution


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a section object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: Sequence[str]) -> dict:
    """Turn ``--a.b value`` / ``--a.b=value`` tokens into a nested dict."""
    out: dict = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"override {tok!r} needs a value")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    return out


def resolve_config(config_path: Optional[str], overrides: dict, env=None) -> dict:
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {config_path} is not valid JSON: {err}") from err
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        _merge(cfg, doc)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from err
    _merge(cfg, overrides)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for section in SEEDED_SECTIONS:
        if cfg[section]["seed"] is None:
            cfg[section]["seed"] = derive_seed(cfg["seed"], section)
    return cfg


def _build(kind, section: str, values: dict, renames: Optional[dict] = None, **extra):
    """Instantiate ``kind`` from a config section; section seeds are consumed elsewhere
    unless ``renames`` maps them."""
    renames = renames or {}
    args = {renames.get(k, k): v for k, v in values.items() if k != "seed" or "seed" in renames}
    args.update(extra)
    try:
        return kind(**args)
    except TypeError as err:
        raise ConfigError(f"section {section!r}: {err}") from err


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return _build(SyntheticSpec, "synthetic", cfg["synthetic"])


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, "train", cfg["train"], {"lr": "learning_rate", "seed": "seed"})


def distill_config(cfg: dict) -> DistillConfig:
    return _build(DistillConfig, "distill", cfg["distill"], train=train_config(cfg))


def learner_config(cfg: dict) -> BaseLearnerConfig:
    return _build(BaseLearnerConfig, "learner", cfg["learner"], {"lambda": "lam"})


def eval_config(cfg: dict, learner: Optional[BaseLearnerConfig] = None) -> EvalConfig:
    e = cfg["eval"]
    return EvalConfig(e["episodes_per_run"], e["runs"], _build(EpisodeSpec, "episode", cfg["episode"]),
                      learner or learner_config(cfg), e["seed"])


def mlp_config(cfg: dict, input_dim: int, num_classes: int) -> MlpConfig:
    return MlpConfig(input_dim, tuple(cfg["model"]["hidden_widths"]), num_classes)


def build_split(cfg: dict, dataset: LabeledVectorDataset) -> MetaSplit:
    return make_meta_split(dataset, tuple(cfg["split"]["fractions"]), cfg["split"]["seed"])


# --------------------------------------------------------------------------
# embedding cache


def save_cache(feats: np.ndarray, labels: np.ndarray, num_classes: int, path) -> None:
    write_labeled_vectors(path, CACHE_MAGIC, feats, labels, num_classes)


def load_cache(path) -> LabeledVectorDataset:
    feats, labels, num_classes = read_labeled_vectors(path, CACHE_MAGIC)
    return LabeledVectorDataset(feats.astype(np.float64), labels, num_classes)


# --------------------------------------------------------------------------
# subcommands


def _write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _check_architecture(model: EmbeddingModel, expected: MlpConfig, what: str) -> None:
    if model.config != expected:
        raise InvalidInputError(f"{what} architecture {model.config} does not match config {expected}")


def cmd_synth(cfg: dict, args) -> int:
    ds = generate_synthetic(synthetic_spec(cfg), cfg["synthetic"]["seed"])
    save_dataset(ds, args.out)
    print(f"n={ds.n} d={ds.dim} num_classes={ds.num_classes}")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    ds = load_dataset(args.data)
    split = build_split(cfg, ds)
    task = merge_meta_train(ds, split)
    mlp = mlp_config(cfg, ds.dim, task.num_classes)
    tc = train_config(cfg)
    if args.multitask:
        model, report = train_multitask(mlp, task, tc, seed=cfg["model"]["seed"])
    else:
        model, report = train_classifier(init_model(mlp, cfg["model"]["seed"]), task, tc)
    save_model(model, args.out)
    rep = report.to_dict()
    wall = rep.pop("wall_time")
    _write_json(args.report or f"{args.out}.json", {
        "command": "train", "config": cfg, "multitask": bool(args.multitask),
        "head": model.head, "model_checksum": load_model(args.out).checksum(), "report": rep,
        "timing": {"wall_time": wall},
    })
    print(f"trained {len(rep['epoch_losses'])} epochs, train accuracy {rep['final_accuracy']:.4f}")
    return EXIT_OK


def cmd_distill(cfg: dict, args) -> int:
    start = time.perf_counter()
    ds = load_dataset(args.data)
    split = build_split(cfg, ds)
    task = merge_meta_train(ds, split)
    mlp = mlp_config(cfg, ds.dim, task.num_classes)
    gen0 = load_model(args.gen0)
    _check_architecture(gen0, mlp, "generation-0 checkpoint")
    scorer = val_scorer(ds, split, eval_config(cfg).replace(episodes_per_run=cfg["eval"]["val_episodes"], runs=1))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    def on_generation(k, model, score):
        path = out_dir / f"gen{k}.fsm"
        save_model(model, path)
        paths.append(path.name)
        print(f"generation {k}: meta-val accuracy {score:.4f}")

    dcfg = distill_config(cfg)
    chain = sequential_distill(task, mlp, dcfg, scorer, seed=cfg["distill"]["seed"], gen0=gen0,
                               on_generation=on_generation)
    write_manifest(chain, paths, dcfg, out_dir / "manifest.json",
                   extra={"command": "distill", "config": cfg,
                          "timing": {"wall_time": time.perf_counter() - start}})
    print(f"selected generation {chain.selected_index}")
    return EXIT_OK


def cmd_extract(cfg: dict, args) -> int:
    model = load_model(args.checkpoint)
    ds = load_dataset(args.data)
    if model.input_dim != ds.dim:
        raise InvalidInputError(f"model input_dim {model.input_dim} != dataset dimension {ds.dim}")
    save_cache(features(model, ds.features), ds.labels, ds.num_classes, args.out)
    print(f"wrote {ds.n} records of dimension {model.feature_dim}")
    return EXIT_OK


def _eval_inputs(cfg: dict, args) -> tuple[Optional[EmbeddingModel], LabeledVectorDataset]:
    if args.cache:
        if cfg["learner"]["augment_copies"]:
            log.warning("augmentation disabled: a feature cache has no inputs to perturb")
            cfg["learner"]["augment_copies"] = 0
        return None, load_cache(args.cache)
    if not args.data:
        raise ConfigError("--data is required with --checkpoint")
    return load_model(args.checkpoint), load_dataset(args.data)


def cmd_eval(cfg: dict, args) -> int:
    start = time.perf_counter()
    model, ds = _eval_inputs(cfg, args)
    split = build_split(cfg, ds)
    report = evaluate(model, ds, split, cfg["eval"]["split"], eval_config(cfg), workers=cfg["eval"]["workers"])
    doc = report.to_dict()
    doc.update(command="eval", config=cfg, eval_config=report.config,
               timing={"wall_time": time.perf_counter() - start})
    _write_json(args.out, doc)
    print(f"accuracy {100 * report.reported_accuracy:.2f} +- {100 * report.reported_ci95:.2f} "
          f"(median of {len(report.run_means)} runs)")
    return EXIT_OK


def cmd_ablate(cfg: dict, args) -> int:
    start = time.perf_counter()
    ds = load_dataset(args.data)
    split = build_split(cfg, ds)
    models = {"vanilla": load_model(args.vanilla)}
    if args.distilled:
        models["distilled"] = load_model(args.distilled)
    else:
        print("notice: no distilled checkpoint given, distill rows skipped")
    rows = ablation_rows(learner_config(cfg), cfg["ablate"]["augment_copies"])
    cells = ablation_grid(models, ds, split, rows, eval_config(cfg), shots=tuple(cfg["ablate"]["shots"]),
                          which_split=cfg["eval"]["split"])
    table = ablation_table_dict(cells)
    _write_json(args.out, {"command": "ablate", "config": cfg, "cells": table,
                           "timing": {"wall_time": time.perf_counter() - start}})
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["row", "k_shot", "model", "status", "accuracy", "ci95", "error"],
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(table)
    for c in table:
        acc = f"{100 * c['accuracy']:.2f} +- {100 * c['ci95']:.2f}" if c["status"] == "ok" else c["status"]
        print(f"{c['row']:<20} {c['k_shot']}-shot  {acc}")
    if not any(c["status"] == "ok" for c in table):
        return EXIT_INVALID
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "distill": cmd_distill,
            "extract": cmd_extract, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshot-lab", description=__doc__.split("\n\n")[0],
        epilog="Any config value can be overridden with --section.key VALUE (JSON-parsed).")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        return p

    p = command("synth", "generate a synthetic FSD1 dataset")
    p.add_argument("--out", required=True)
    p = command("train", "train the embedding on the merged meta-training classes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="FSM1 checkpoint path")
    p.add_argument("--report", help="report JSON path (default: <out>.json)")
    p.add_argument("--multitask", action="store_true", help="one-vs-all sigmoid heads instead of softmax")
    p = command("distill", "sequential self-distillation from a generation-0 checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--gen0", required=True)
    p.add_argument("--out-dir", required=True)
    p = command("extract", "write an FSE1 feature cache")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p = command("eval", "episodic evaluation of a checkpoint or feature cache")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--cache")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p = command("ablate", "NN / LR / +L2 / +Aug / +Distill table for 1- and 5-shot")
    p.add_argument("--data", required=True)
    p.add_argument("--vanilla", required=True)
    p.add_argument("--distilled")
    p.add_argument("--out", required=True, help="JSON table path")
    p.add_argument("--csv", help="CSV table path (default: <out> with .csv suffix)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args.config, parse_overrides(extra))
        # divergence is detected explicitly; the raw overflow warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](cfg, args)
    except FormatError as err:
        print(f"format error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (DivergedTrainingError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
