"""Episodic evaluation protocol, ablation grids and generation sweeps.

A report runs ``runs`` independent streams of ``episodes_per_run`` episodes,
records each run's mean accuracy with a 95% confidence half-width, and
reports the median of the run means (lower middle value for even counts).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselearners import (CENTROID_COSINE, CENTROID_L2, LOGISTIC, BaseLearnerConfig,
                           episode_accuracy)
from .datasets import LabeledVectorDataset, MetaSplit
from .distillation import GenerationChain
from .embedder import EmbeddingModel
from .episodes import EpisodeSpec, InfeasibleEpisodeError, check_feasible, episode_stream
from .numerics import InvalidInputError, SeededRng, derive_seed


@dataclass(frozen=True)
class EvalConfig:
    episodes_per_run: int = 1000
    runs: int = 3
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    learner: BaseLearnerConfig = field(default_factory=BaseLearnerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.episodes_per_run < 1 or self.runs < 1:
            raise InvalidInputError("episodes_per_run and runs must be >= 1")

    def replace(self, **changes) -> "EvalConfig":
        d = {f: getattr(self, f) for f in ("episodes_per_run", "runs", "episode", "learner", "seed")}
        d.update(changes)
        return EvalConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    run_means: list[float]
    run_ci95: list[float]
    run_counts: list[int]
    reported_accuracy: float
    reported_run: int
    episode_accuracies: list[float]
    model_checksum: Optional[str] = None
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def reported_ci95(self) -> float:
        return self.run_ci95[self.reported_run]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "per_run": [{"mean": m, "ci95": c, "n": n}
                        for m, c, n in zip(self.run_means, self.run_ci95, self.run_counts)],
            "reported_accuracy": self.reported_accuracy,
            "reported_run": self.reported_run,
            "episode_accuracies": self.episode_accuracies,
            "model_checksum": self.model_checksum,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def confidence_interval(accuracies: Sequence[float]) -> float:
    """95% half-width: 1.96 * sample std (n-1) / sqrt(n)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        raise InvalidInputError("confidence interval needs at least two values")
    return float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


def median_run(run_means: Sequence[float]) -> int:
    """Index of the median run; even counts take the lower middle value."""
    order = sorted(range(len(run_means)), key=lambda i: (run_means[i], i))
    return order[(len(order) - 1) // 2]


def evaluate(model: Optional[EmbeddingModel], dataset: LabeledVectorDataset, split: MetaSplit,
             which_split: str, config: EvalConfig, workers: int = 1) -> EvalReport:
    """Run the multi-run episodic protocol on the val or test classes.

    ``model=None`` treats the dataset rows as precomputed features. Episodes
    are keyed by (seed, run, index), so ``workers`` never changes the result.
    """
    classes = split.classes(which_split)
    check_feasible(dataset, classes, config.episode)
    checksum = model.checksum() if model is not None else None
    means, cis, counts, per_run = [], [], [], []
    for r in range(config.runs):
        run_seed = derive_seed(config.seed, "run", r)
        stream = episode_stream(dataset, classes, config.episode, config.episodes_per_run, run_seed)

        def one(i, stream=stream, run_seed=run_seed, r=r):
            rng = SeededRng(derive_seed(run_seed, "augment", i))
            try:
                episode = stream[i]
            except InfeasibleEpisodeError as err:
                raise InfeasibleEpisodeError(f"run {r}, episode {i}: {err}") from err
            return episode_accuracy(episode, model, config.learner, rng)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                accs = list(pool.map(one, range(config.episodes_per_run)))
        else:
            accs = [one(i) for i in range(config.episodes_per_run)]
        means.append(float(np.mean(accs)))
        cis.append(confidence_interval(accs) if len(accs) > 1 else 0.0)
        counts.append(len(accs))
        per_run.append(accs)
    if model is not None and model.checksum() != checksum:
        raise RuntimeError("embedding model was modified during evaluation")
    best = median_run(means)
    return EvalReport(means, cis, counts, means[best], best, per_run[best], checksum,
                      config.seed, {"which_split": which_split, **config.to_dict()})


def val_scorer(dataset: LabeledVectorDataset, split: MetaSplit, config: EvalConfig):
    """Callable returning meta-validation accuracy, for the distillation chain."""
    return lambda model: evaluate(model, dataset, split, "val", config).reported_accuracy


# --------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationRow:
    name: str
    learner: BaseLearnerConfig
    model_key: str = "vanilla"


def ablation_rows(base: BaseLearnerConfig = BaseLearnerConfig(), augment_copies: int = 5) -> list[AblationRow]:
    """NN, LR, LR + L2 norm, + support augmentation, + distilled embedding."""
    lr = base.replace(kind=LOGISTIC, normalize=False, augment_copies=0)
    return [
        AblationRow("NN", base.replace(kind=CENTROID_L2, normalize=False, augment_copies=0)),
        AblationRow("LR", lr),
        AblationRow("LR+L2", lr.replace(normalize=True)),
        AblationRow("LR+L2+Aug", lr.replace(normalize=True, augment_copies=augment_copies)),
        AblationRow("LR+L2+Aug+Distill", lr.replace(normalize=True, augment_copies=augment_copies),
                    model_key="distilled"),
    ]


def ablation_grid(models: dict, dataset: LabeledVectorDataset, split: MetaSplit,
                  rows: Sequence[AblationRow], config: EvalConfig, shots: Sequence[int] = (1, 5),
                  which_split: str = "test") -> list[dict]:
    """One cell per (row, shot), in row order then shot order.

    Rows whose model is missing from ``models`` are marked skipped; a failing
    cell records its error and the remaining cells still run.
    """
    cells = []
    for row in rows:
        for k in shots:
            cell = {"row": row.name, "k_shot": k, "model": row.model_key}
            model = models.get(row.model_key)
            if model is None:
                cell["status"] = "skipped"
                cell["error"] = f"no {row.model_key} model supplied"
                cells.append(cell)
                continue
            spec = EpisodeSpec(config.episode.n_way, k, config.episode.q_queries)
            try:
                report = evaluate(model, dataset, split, which_split,
                                  config.replace(episode=spec, learner=row.learner))
            except Exception as err:  # recorded in-table, grid continues
                cell["status"] = "error"
                cell["error"] = str(err)
            else:
                cell["status"] = "ok"
                cell["report"] = report
            cells.append(cell)
    return cells


def ablation_table_dict(cells: list[dict]) -> list[dict]:
    out = []
    for c in cells:
        d = {k: v for k, v in c.items() if k != "report"}
        if "report" in c:
            r = c["report"]
            d.update(accuracy=r.reported_accuracy, ci95=r.reported_ci95,
                     per_run=r.to_dict()["per_run"])
        out.append(d)
    return out


SWEEP_KINDS = {
    "LR": BaseLearnerConfig(kind=LOGISTIC, normalize=False),
    "LR+Norm": BaseLearnerConfig(kind=LOGISTIC, normalize=True),
    "NN": BaseLearnerConfig(kind=CENTROID_L2, normalize=False),
    "NN+Norm": BaseLearnerConfig(kind=CENTROID_COSINE, normalize=True),
}


def generation_sweep(chain: GenerationChain, dataset: LabeledVectorDataset, split: MetaSplit,
                     config: EvalConfig, kinds: Sequence[str] = tuple(SWEEP_KINDS),
                     which_split: str = "test") -> dict:
    """Accuracy table keyed by (generation, kind)."""
    if not chain.models:
        raise InvalidInputError("empty generation chain")
    table = {}
    for g, model in enumerate(chain.models):
        for kind in kinds:
            learner = SWEEP_KINDS[kind].replace(lam=config.learner.lam,
                                                solver_tol=config.learner.solver_tol,
                                                solver_max_iters=config.learner.solver_max_iters)
            table[(g, kind)] = evaluate(model, dataset, split, which_split,
                                        config.replace(learner=learner))
    return table
