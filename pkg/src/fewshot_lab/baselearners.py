"""Per-episode classifiers fitted on frozen embeddings.

A fresh classifier is fitted for every episode from the support set only;
query rows never influence fitting (normalisation is per row).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import embedder
from .episodes import Episode
from .numerics import InvalidInputError, SeededRng, l2_normalize_rows, log_softmax_rows

LOGISTIC = "logistic-regression"
LINEAR_SVM = "linear-svm"
CENTROID_L2 = "nearest-centroid-L2"
CENTROID_COSINE = "nearest-centroid-cosine"
KINDS = (LOGISTIC, LINEAR_SVM, CENTROID_L2, CENTROID_COSINE)


@dataclass(frozen=True)
class BaseLearnerConfig:
    kind: str = LOGISTIC
    normalize: bool = False
    augment_copies: int = 0
    augment_sigma_scale: float = 0.1
    lam: float = 1.0
    solver_tol: float = 1e-6
    solver_max_iters: int = 1000
    regularize_bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown base learner kind {self.kind!r}; choose from {KINDS}")
        if self.lam < 0 or self.solver_tol <= 0 or self.augment_copies < 0:
            raise InvalidInputError("need lam >= 0, solver_tol > 0, augment_copies >= 0")
        if self.solver_max_iters < 1 or self.augment_sigma_scale < 0:
            raise InvalidInputError("need solver_max_iters >= 1, augment_sigma_scale >= 0")

    def replace(self, **changes) -> "BaseLearnerConfig":
        d = asdict(self)
        d.update(changes)
        return BaseLearnerConfig(**d)


@dataclass
class LinearClassifier:
    weights: np.ndarray   # (n_way, feature_dim)
    bias: np.ndarray      # (n_way,)
    converged: bool = True
    grad_norm: float = 0.0
    iterations: int = 0
    objective: float = float("nan")

    def scores(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (n_way, feature_dim)
    metric: str            # "L2" or "cosine"


# --------------------------------------------------------------------------
# support preprocessing


def embed(model: Optional[embedder.EmbeddingModel], x: np.ndarray) -> np.ndarray:
    """Frozen-embedding features; ``model=None`` means ``x`` already holds features."""
    if model is None:
        return np.asarray(x, dtype=np.float64)
    return embedder.features(model, x)


def preprocess_support(episode: Episode, model: Optional[embedder.EmbeddingModel],
                       config: BaseLearnerConfig,
                       rng: Optional[SeededRng] = None) -> tuple[np.ndarray, np.ndarray]:
    """Support features and labels after augmentation and normalisation.

    Each augmented support row contributes itself followed by
    ``augment_copies`` input-space perturbations with per-dimension sigma
    ``augment_sigma_scale * std(support inputs)``.
    """
    x = episode.support_features
    labels = episode.support_labels
    m = config.augment_copies
    if m > 0:
        if rng is None:
            raise InvalidInputError("support augmentation needs an rng")
        sigma = config.augment_sigma_scale * x.std(axis=0)
        noise = rng.normal((x.shape[0], m, x.shape[1])) * sigma
        copies = x[:, None, :] + noise
        x = np.concatenate([x[:, None, :], copies], axis=1).reshape(-1, x.shape[1])
        labels = np.repeat(labels, m + 1)
    feats = embed(model, x)
    if config.normalize:
        feats = l2_normalize_rows(feats)
    return feats, labels


def preprocess_query(episode: Episode, model, config: BaseLearnerConfig) -> np.ndarray:
    feats = embed(model, episode.query_features)
    return l2_normalize_rows(feats) if config.normalize else feats


# --------------------------------------------------------------------------
# convex solver


@dataclass
class SolverResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool


def gradient_descent(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
                     tol: float, max_iters: int, armijo_c: float = 1e-4,
                     memory: int = 10) -> SolverResult:
    """Full-batch gradient descent with backtracking line search.

    Trial steps are Barzilai-Borwein lengths, halved until the Armijo
    condition holds against the largest of the last ``memory`` objective
    values (``memory=1`` is the classic monotone rule). Stops when
    ``max|grad| < tol``.
    """
    x = x0.copy()
    f, g = fun(x)
    history = [f]
    step = 1.0
    it = 0
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    while gnorm >= tol and it < max_iters:
        gg = float(g @ g)
        ref = max(history[-memory:])
        t = step
        while True:
            x_new = x - t * g
            f_new, g_new = fun(x_new)
            if f_new <= ref - armijo_c * t * gg:
                break
            t *= 0.5
            if t < 1e-20:
                return SolverResult(x, float(f), gnorm, it, False)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        step = min(max(float(s @ s) / sy, 1e-10), 1e10) if sy > 0 else min(2.0 * t, 1e10)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        gnorm = float(np.max(np.abs(g)))
        it += 1
    return SolverResult(x, float(f), gnorm, it, gnorm < tol)


def _check_support(x, labels) -> tuple[np.ndarray, np.ndarray, int]:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise InvalidInputError(f"support features {x.shape} and labels {labels.shape} disagree")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("support features contain non-finite values")
    if np.unique(labels).size < 2:
        raise InvalidInputError("support set needs at least two distinct labels")
    return x, labels, int(labels.max()) + 1


def logistic_objective(x: np.ndarray, labels: np.ndarray, n_way: int, lam: float,
                       regularize_bias: bool) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Mean multinomial CE + (lam/2)||W||^2 over packed parameters [W.ravel(), b]."""
    n, d = x.shape
    rows = np.arange(n)
    onehot = np.zeros((n, n_way))
    onehot[rows, labels] = 1.0

    def fun(theta):
        w = theta[:n_way * d].reshape(n_way, d)
        b = theta[n_way * d:]
        logp = log_softmax_rows(x @ w.T + b)
        val = -logp[rows, labels].mean() + 0.5 * lam * float(np.sum(w * w))
        r = (np.exp(logp) - onehot) / n
        gw = r.T @ x + lam * w
        gb = r.sum(axis=0)
        if regularize_bias:
            val += 0.5 * lam * float(b @ b)
            gb = gb + lam * b
        return val, np.concatenate([gw.ravel(), gb])

    return fun


def squared_hinge_objective(x: np.ndarray, labels: np.ndarray, n_way: int, lam: float,
                            regularize_bias: bool) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Sum over classes of one-vs-rest mean squared hinge + (lam/2)||w_c||^2."""
    n, d = x.shape
    signs = -np.ones((n, n_way))
    signs[np.arange(n), labels] = 1.0

    def fun(theta):
        w = theta[:n_way * d].reshape(n_way, d)
        b = theta[n_way * d:]
        slack = np.maximum(0.0, 1.0 - signs * (x @ w.T + b))
        val = float(np.sum(slack * slack)) / n + 0.5 * lam * float(np.sum(w * w))
        r = -2.0 * signs * slack / n
        gw = r.T @ x + lam * w
        gb = r.sum(axis=0)
        if regularize_bias:
            val += 0.5 * lam * float(b @ b)
            gb = gb + lam * b
        return val, np.concatenate([gw.ravel(), gb])

    return fun


def _fit_linear(objective, x, labels, config: BaseLearnerConfig) -> LinearClassifier:
    x, labels, n_way = _check_support(x, labels)
    d = x.shape[1]
    # With an unregularised bias, solving on centred rows and folding the
    # shift back into b is the same problem, only better conditioned. The
    # tolerance is tightened so the original gradient still meets solver_tol.
    shift = np.zeros(d) if config.regularize_bias else x.mean(axis=0)
    tol = config.solver_tol / (1.0 + float(np.abs(shift).sum()))
    fun = objective(x - shift, labels, n_way, config.lam, config.regularize_bias)
    res = gradient_descent(fun, np.zeros(n_way * (d + 1)), tol, config.solver_max_iters)
    w = res.x[:n_way * d].reshape(n_way, d).copy()
    b = res.x[n_way * d:] - w @ shift
    value, grad = objective(x, labels, n_way, config.lam, config.regularize_bias)(
        np.concatenate([w.ravel(), b]))
    gnorm = float(np.max(np.abs(grad)))
    return LinearClassifier(w, b, gnorm < config.solver_tol, gnorm, res.iterations, value)


def fit_logistic_regression(x, labels, config: BaseLearnerConfig) -> LinearClassifier:
    return _fit_linear(logistic_objective, x, labels, config)


def fit_linear_svm(x, labels, config: BaseLearnerConfig) -> LinearClassifier:
    return _fit_linear(squared_hinge_objective, x, labels, config)


def fit_nearest_centroid(x, labels, metric: str = "L2") -> CentroidSet:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_way = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_way)
    if np.any(counts == 0):
        raise InvalidInputError(f"episode label {int(np.argmin(counts))} has no support rows")
    sums = np.zeros((n_way, x.shape[1]))
    np.add.at(sums, labels, x)
    centroids = sums / counts[:, None]
    if metric == "cosine":
        centroids = l2_normalize_rows(centroids)
    elif metric != "L2":
        raise InvalidInputError(f"unknown centroid metric {metric!r}")
    return CentroidSet(centroids, metric)


def predict(clf: Union[LinearClassifier, CentroidSet], x) -> np.ndarray:
    """Predicted episode labels; ties go to the lowest label index."""
    x = np.asarray(x, dtype=np.float64)
    width = clf.weights.shape[1] if isinstance(clf, LinearClassifier) else clf.centroids.shape[1]
    if x.ndim != 2 or x.shape[1] != width:
        raise InvalidInputError(f"query features {x.shape} do not match classifier width {width}")
    if isinstance(clf, LinearClassifier):
        return np.argmax(clf.scores(x), axis=1)
    if clf.metric == "L2":
        diff = x[:, None, :] - clf.centroids[None, :, :]
        return np.argmin(np.einsum("qcd,qcd->qc", diff, diff), axis=1)
    return np.argmax(x @ clf.centroids.T, axis=1)


def fit(x, labels, config: BaseLearnerConfig):
    if config.kind == LOGISTIC:
        return fit_logistic_regression(x, labels, config)
    if config.kind == LINEAR_SVM:
        return fit_linear_svm(x, labels, config)
    return fit_nearest_centroid(x, labels, "L2" if config.kind == CENTROID_L2 else "cosine")


def episode_accuracy(episode: Episode, model: Optional[embedder.EmbeddingModel],
                     config: BaseLearnerConfig, rng: Optional[SeededRng] = None) -> float:
    support, labels = preprocess_support(episode, model, config, rng)
    clf = fit(support, labels, config)
    pred = predict(clf, preprocess_query(episode, model, config))
    return float(np.mean(pred == episode.query_labels))
