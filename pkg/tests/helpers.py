"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np

from fewshot_lab.embedder import EmbeddingModel, forward
from fewshot_lab.numerics import cross_entropy


def mean_ce(model: EmbeddingModel, x, y) -> float:
    logits, _ = forward(model, x)
    return float(np.mean([cross_entropy(z, t) for z, t in zip(logits, y)]))


def mean_bce(model: EmbeddingModel, x, y) -> float:
    logits, _ = forward(model, x)
    t = np.eye(logits.shape[1])[y]
    p = 1.0 / (1.0 + np.exp(-logits))
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log1p(-p))))


def numeric_gradients(loss, model: EmbeddingModel, eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss(model)`` for every parameter array."""
    out = []
    for p in model.parameters():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss(model)
            flat[i] = old - eps
            down = loss(model)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_relative_error(analytic, numeric) -> float:
    """Largest absolute difference, relative to the largest gradient entry."""
    a = np.concatenate([np.ravel(g) for g in analytic])
    n = np.concatenate([np.ravel(g) for g in numeric])
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


def flat_grads(pairs) -> list[np.ndarray]:
    return [g for pair in pairs for g in pair]


# --- convex-solver oracles -------------------------------------------------
# Objectives are written out term by term, sharing no code with the package.


def lr_objective_ref(w, b, x, y, lam, regularize_bias=False):
    total = 0.0
    for xi, yi in zip(x, y):
        scores = [float(np.dot(w[c], xi) + b[c]) for c in range(len(b))]
        m = max(scores)
        total += m + np.log(sum(np.exp(s - m) for s in scores)) - scores[yi]
    val = total / len(y) + 0.5 * lam * float(np.sum(np.square(w)))
    if regularize_bias:
        val += 0.5 * lam * float(np.sum(np.square(b)))
    return val


def svm_objective_ref(w, b, x, y, lam, regularize_bias=False):
    val = 0.0
    for c in range(len(b)):
        hinge = 0.0
        for xi, yi in zip(x, y):
            s = 1.0 if yi == c else -1.0
            hinge += max(0.0, 1.0 - s * (float(np.dot(w[c], xi)) + b[c])) ** 2
        val += hinge / len(y) + 0.5 * lam * float(np.dot(w[c], w[c]))
        if regularize_bias:
            val += 0.5 * lam * b[c] ** 2
    return val


def grid_minimum_2d(f, center=(0.0, 0.0), half_width=20.0, points=81, rounds=12) -> float:
    """Dense grid search, re-centred and shrunk around the best cell each round.

    ``f`` must accept broadcast arrays of the two parameters.
    """
    cx, cy = center
    best = np.inf
    for _ in range(rounds):
        xs = np.linspace(cx - half_width, cx + half_width, points)
        ys = np.linspace(cy - half_width, cy + half_width, points)
        vals = f(xs[:, None], ys[None, :])
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        best = min(best, vals[i, j])
        cx, cy = xs[i], ys[j]
        half_width *= 4.0 / (points - 1)
    return float(best)


def lr_two_class_1d(x, y, lam):
    """Reduced 2-class, 1-d objective in (w0 - w1, b0 - b1); W = (u/2, -u/2) is norm-optimal."""
    x = np.asarray(x)[:, 0]

    def f(u, v):
        total = 0.0
        for xi, yi in zip(x, y):
            margin = u * xi + v  # score0 - score1
            total = total + np.logaddexp(0.0, -margin if yi == 0 else margin)
        return total / len(y) + 0.5 * lam * u * u / 2.0

    return f


def svm_1d_grid_oracle(x, y, lam, n_way=2) -> float:
    """One-vs-rest classes decouple into one (w_c, b_c) grid search each."""
    x = np.asarray(x)[:, 0]
    total = 0.0
    for c in range(n_way):
        s = np.where(np.asarray(y) == c, 1.0, -1.0)

        def g(w, b, s=s):
            h = sum(np.maximum(0.0, 1.0 - si * (w * xi + b)) ** 2 for si, xi in zip(s, x))
            return h / len(s) + 0.5 * lam * w * w

        total += grid_minimum_2d(g)
    return total


def bfgs_minimum(f, dim: int) -> float:
    """Quasi-Newton minimum with finite-difference gradients (no analytic code shared)."""
    from scipy.optimize import minimize

    best = np.inf
    for start in (np.zeros(dim), np.full(dim, 0.1)):
        res = minimize(f, start, method="BFGS", options={"gtol": 1e-9, "maxiter": 10_000})
        best = min(best, float(res.fun))
    return best


def unpack(theta, n_way, d):
    return theta[:n_way * d].reshape(n_way, d), theta[n_way * d:]


# --- acceptance summary ------------------------------------------------------

ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    """Log one acceptance line (printed in the terminal summary) and assert it."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line
