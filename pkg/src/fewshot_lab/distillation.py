"""Sequential self-distillation: each generation learns from the previous one.

Generation 0 is trained with plain cross-entropy. Generation k is a freshly
initialised network of the same shape trained on

    alpha * CE(student, label) + beta * T^2 * KL(teacher_T || student_T)

where ``*_T`` are softmax outputs at temperature T and the teacher targets
are computed once per generation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import MergedTask
from .embedder import (DivergedTrainingError, EmbeddingModel, MlpConfig, TrainConfig,
                       ce_logit_grad, forward, init_model, sgd_train, train_classifier)
from .numerics import (KL_FLOOR, InvalidInputError, derive_seed, kl_divergence,
                       log_softmax_rows, softmax, softmax_rows, cross_entropy)

TEACHER_STUDENT = "teacher||student"
STUDENT_TEACHER = "student||teacher"


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    beta: float = 0.5
    temperature: float = 4.0
    generations: int = 2
    kl_direction: str = TEACHER_STUDENT
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise InvalidInputError("need alpha >= 0, beta >= 0 and alpha + beta > 0")
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be > 0")
        if self.generations < 1:
            raise InvalidInputError("generations must be >= 1")
        if self.kl_direction not in (TEACHER_STUDENT, STUDENT_TEACHER):
            raise InvalidInputError(f"unknown kl_direction {self.kl_direction!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["decay_epochs"] = list(self.train.decay_epochs)
        return d


@dataclass
class GenerationChain:
    models: list[EmbeddingModel]
    val_accuracies: list[float]
    selected_index: int

    @property
    def selected(self) -> EmbeddingModel:
        return self.models[self.selected_index]


def soft_targets(teacher: EmbeddingModel, task: MergedTask, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise InvalidInputError("temperature must be > 0")
    if teacher.num_classes != task.num_classes:
        raise InvalidInputError("teacher head does not match the task's classes")
    logits, _ = forward(teacher, task.features)
    return softmax_rows(logits / temperature)


def kd_loss(student_logits, label: int, teacher_probs, config: DistillConfig) -> float:
    """Single-sample distillation loss (see module docstring)."""
    z = np.asarray(student_logits, dtype=np.float64)
    p = np.asarray(teacher_probs, dtype=np.float64)
    if z.shape != p.shape:
        raise InvalidInputError(f"student logits {z.shape} vs teacher probs {p.shape}")
    t = config.temperature
    q = softmax(z / t)
    if config.kl_direction == TEACHER_STUDENT:
        kl = kl_divergence(p, q)
    else:
        kl = kl_divergence(q, p)
    return config.alpha * cross_entropy(z, label) + config.beta * t * t * kl


def kd_logit_grad(logits: np.ndarray, labels: np.ndarray, teacher_probs: np.ndarray,
                  config: DistillConfig) -> tuple[float, np.ndarray]:
    """Batch-mean :func:`kd_loss` and its gradient with respect to the logits."""
    b = logits.shape[0]
    t = config.temperature
    ce, g_ce = ce_logit_grad(logits, labels)
    log_q = log_softmax_rows(logits / t)
    q = np.exp(log_q)
    p = teacher_probs
    if config.kl_direction == TEACHER_STUDENT:
        # d/dz KL(p || softmax(z/T)) = (q - p) / T
        log_p = np.log(np.maximum(p, KL_FLOOR))
        kl = np.where(p > 0, p * (log_p - log_q), 0.0).sum(axis=1)
        g_kl = (q - p) / t
    else:
        # clamp matches kl_divergence, which floors the second argument
        log_p = np.log(np.maximum(p, KL_FLOOR))
        r = log_q - log_p
        kl = (q * r).sum(axis=1)
        g_kl = q * (r - kl[:, None]) / t
    loss = config.alpha * ce + config.beta * t * t * kl.mean()
    grad = config.alpha * g_ce + (config.beta * t * t / b) * g_kl
    return float(loss), grad


def distill_generation(teacher: EmbeddingModel, task: MergedTask, mlp_config: MlpConfig,
                       config: DistillConfig, seed: int) -> tuple[EmbeddingModel, object]:
    """Train a fresh student of shape ``mlp_config`` against ``teacher``."""
    if teacher.config != mlp_config:
        raise InvalidInputError(f"teacher shape {teacher.config} differs from {mlp_config}")
    targets = soft_targets(teacher, task, config.temperature)
    student = init_model(mlp_config, seed)
    labels = task.labels

    def loss_fn(z, rows):
        return kd_logit_grad(z, labels[rows], targets[rows], config)

    return sgd_train(student, task.features, loss_fn, config.train, labels)


def mean_kl_to_targets(model: EmbeddingModel, task: MergedTask, targets: np.ndarray,
                       temperature: float) -> float:
    logits, _ = forward(model, task.features)
    q = softmax_rows(logits / temperature)
    return float(np.mean([kl_divergence(p, qq) for p, qq in zip(targets, q)]))


def sequential_distill(task: MergedTask, mlp_config: MlpConfig, config: DistillConfig,
                       val_score: Callable[[EmbeddingModel], float],
                       seed: int = 0, gen0: Optional[EmbeddingModel] = None,
                       on_generation: Optional[Callable[[int, EmbeddingModel, float], None]] = None,
                       ) -> GenerationChain:
    """Build generation 0 (or take ``gen0``) and distil ``config.generations`` more.

    ``val_score(model)`` returns few-shot meta-validation accuracy; the chain
    selects the best generation, earliest on ties.
    """
    models, scores = [], []
    for k in range(config.generations + 1):
        gen_seed = derive_seed(seed, "generation", k)
        train_cfg = _reseed(config.train, derive_seed(config.train.seed, "generation", k))
        try:
            if k == 0:
                model = gen0 if gen0 is not None else train_classifier(
                    init_model(mlp_config, gen_seed), task, train_cfg)[0]
            else:
                model, _ = distill_generation(models[-1], task, mlp_config,
                                              _with_train(config, train_cfg), gen_seed)
        except DivergedTrainingError as err:
            raise DivergedTrainingError(err.epoch, generation=k) from err
        models.append(model)
        scores.append(float(val_score(model)))
        if on_generation is not None:
            on_generation(k, model, scores[-1])
    best = int(np.argmax(scores))
    return GenerationChain(models, scores, best)


def _reseed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = asdict(cfg)
    d["seed"] = seed
    return TrainConfig(**d)


def _with_train(cfg: DistillConfig, train: TrainConfig) -> DistillConfig:
    return DistillConfig(cfg.alpha, cfg.beta, cfg.temperature, cfg.generations,
                         cfg.kl_direction, train)


def write_manifest(chain: GenerationChain, checkpoint_paths: list, config: DistillConfig,
                   path, extra: Optional[dict] = None) -> None:
    doc = {
        "generations": [
            {"index": i, "checkpoint": str(p), "val_accuracy": a}
            for i, (p, a) in enumerate(zip(checkpoint_paths, chain.val_accuracies))
        ],
        "val_accuracies": list(chain.val_accuracies),
        "selected_index": chain.selected_index,
        "distill_config": config.to_dict(),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))
