import math

import numpy as np
import pytest

from fewshot_lab.datasets import MergedTask
from fewshot_lab.distillation import (STUDENT_TEACHER, DistillConfig, distill_generation,
                                      kd_logit_grad, kd_loss, mean_kl_to_targets,
                                      sequential_distill, soft_targets)
from fewshot_lab.embedder import (DivergedTrainingError, MlpConfig, TrainConfig,
                                  backward_from_logit_grad, forward, init_model, train_classifier)
from fewshot_lab.numerics import InvalidInputError, cross_entropy, softmax

from helpers import flat_grads, max_relative_error, numeric_gradients

TRAIN = TrainConfig(learning_rate=0.05, epochs=6, decay_epochs=(4,), batch_size=16, seed=5)
MLP = MlpConfig(5, (12, 8), 4)


@pytest.fixture(scope="module")
def task():
    rng = np.random.default_rng(0)
    means = rng.normal(0, 2.0, (4, 5))
    y = np.repeat(np.arange(4), 20)
    x = means[y] + rng.normal(0, 1.0, (80, 5))
    return MergedTask(x, y, {c: c for c in range(4)})


@pytest.fixture(scope="module")
def teacher(task):
    return train_classifier(init_model(MLP, 1), task, TRAIN)[0]


def test_soft_targets_limits(teacher, task):
    hot = soft_targets(teacher, task, 1e6)
    assert np.max(np.abs(hot - 0.25)) < 1e-4
    plain = soft_targets(teacher, task, 1.0)
    logits, _ = forward(teacher, task.features)
    for row, z in zip(plain, logits):
        np.testing.assert_allclose(row, softmax(z), atol=1e-15)
    for t in (0.5, 4.0, 50.0):
        np.testing.assert_array_equal(np.argmax(soft_targets(teacher, task, t), 1), np.argmax(logits, 1))
    np.testing.assert_allclose(soft_targets(teacher, task, 4.0).sum(1), 1.0)
    with pytest.raises(InvalidInputError):
        soft_targets(teacher, task, 0.0)


def test_kd_loss_reductions():
    z = np.array([0.3, -1.2, 2.0])
    p = np.array([0.2, 0.3, 0.5])
    ce_only = DistillConfig(alpha=1.0, beta=0.0, temperature=3.0)
    assert kd_loss(z, 2, p, ce_only) == cross_entropy(z, 2)
    self_match = DistillConfig(alpha=0.0, beta=1.0, temperature=1.0)
    assert kd_loss(z, 0, softmax(z), self_match) == pytest.approx(0.0, abs=1e-15)


def test_kd_loss_hand_computed():
    cfg = DistillConfig(alpha=0.5, beta=0.5, temperature=1.0)
    # student logits [1, 0], label 0, teacher probs [0.6, 0.4]
    q0 = math.exp(1) / (math.exp(1) + 1)
    ce = -math.log(q0)
    kl = 0.6 * math.log(0.6 / q0) + 0.4 * math.log(0.4 / (1 - q0))
    assert kd_loss([1.0, 0.0], 0, [0.6, 0.4], cfg) == pytest.approx(0.5 * ce + 0.5 * kl, abs=1e-9)


def test_kd_loss_temperature_scaling():
    cfg = DistillConfig(alpha=0.0, beta=1.0, temperature=2.0)
    p = np.array([0.7, 0.3])
    q = softmax(np.array([1.0, 0.2]) / 2.0)
    kl = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    assert kd_loss([1.0, 0.2], 1, p, cfg) == pytest.approx(4.0 * kl, rel=1e-12)


def test_config_validation():
    for bad in (dict(alpha=-1), dict(alpha=0, beta=0), dict(temperature=0), dict(generations=0),
                dict(kl_direction="sideways")):
        with pytest.raises(InvalidInputError):
            DistillConfig(**bad)


@pytest.mark.parametrize("direction", ["teacher||student", STUDENT_TEACHER])
@pytest.mark.parametrize("seed", range(3))
def test_kd_gradient_matches_finite_differences(direction, seed):
    rng = np.random.default_rng(seed)
    cfg = DistillConfig(alpha=0.3, beta=0.7, temperature=float(rng.choice([1.0, 2.5, 4.0])),
                        kl_direction=direction)
    model = init_model(MlpConfig(3, (5,), 3), seed)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, 6)
    targets = np.array([softmax(r) for r in rng.normal(size=(6, 3))])

    def loss(m):
        logits, _ = forward(m, x)
        return float(np.mean([kd_loss(z, t, p, cfg) for z, t, p in zip(logits, y, targets)]))

    logits, cache = forward(model, x)
    value, g = kd_logit_grad(logits, y, targets, cfg)
    assert value == pytest.approx(loss(model), rel=1e-10)
    analytic = flat_grads(backward_from_logit_grad(model, cache, g))
    assert max_relative_error(analytic, numeric_gradients(loss, model)) < 1e-4


def test_reduction_to_plain_training_is_bit_identical(teacher, task):
    cfg = DistillConfig(alpha=1.0, beta=0.0, temperature=4.0, train=TRAIN)
    student, _ = distill_generation(teacher, task, MLP, cfg, seed=7)
    plain, _ = train_classifier(init_model(MLP, 7), task, TRAIN)
    assert student.checksum() == plain.checksum()


def test_distillation_moves_student_towards_teacher(teacher, task):
    cfg = DistillConfig(alpha=0.5, beta=0.5, temperature=4.0, train=TRAIN)
    before = teacher.checksum()
    student, _ = distill_generation(teacher, task, MLP, cfg, seed=7)
    assert teacher.checksum() == before
    targets = soft_targets(teacher, task, 4.0)
    fresh = init_model(MLP, 7)
    assert mean_kl_to_targets(student, task, targets, 4.0) < mean_kl_to_targets(fresh, task, targets, 4.0)
    assert student.checksum() != teacher.checksum()


def test_distill_rejects_mismatched_architecture(teacher, task):
    with pytest.raises(InvalidInputError):
        distill_generation(teacher, task, MlpConfig(5, (12,), 4), DistillConfig(train=TRAIN), 0)


def test_sequential_chain_shape_and_selection(task):
    scores = iter([0.5, 0.7, 0.6])
    cfg = DistillConfig(generations=2, train=TRAIN)
    chain = sequential_distill(task, MLP, cfg, lambda m: next(scores), seed=3)
    assert len(chain.models) == 3 and chain.val_accuracies == [0.5, 0.7, 0.6]
    assert chain.selected_index == 1
    flat = sequential_distill(task, MLP, DistillConfig(generations=1, train=TRAIN),
                              lambda m: 0.4, seed=3)
    assert len(flat.models) == 2 and flat.selected_index == 0


def test_sequential_chain_is_deterministic(task):
    cfg = DistillConfig(generations=1, train=TRAIN)
    a = sequential_distill(task, MLP, cfg, lambda m: 0.0, seed=3)
    b = sequential_distill(task, MLP, cfg, lambda m: 0.0, seed=3)
    assert [m.checksum() for m in a.models] == [m.checksum() for m in b.models]


def test_chain_errors_carry_generation(task):
    huge = MergedTask(task.features * 1e300, task.labels, task.label_map)
    with pytest.raises(DivergedTrainingError) as err:
        with np.errstate(all="ignore"):
            sequential_distill(huge, MLP, DistillConfig(generations=1, train=TRAIN), lambda m: 0.0)
    assert err.value.generation == 0
