"""Gradient saliency maps, feature rankings and pairwise importance gaps."""

from dataclasses import dataclass, field

import numpy as np

from rankshield.errors import ShapeError, UsageError
from rankshield.model import (_check_class, _check_x, hvp_batch, input_gradient,
                              input_gradients, predict)

SIMPLE = "SimpleGrad"
SMOOTH = "SmoothGrad"
INTEGRATED = "IntegratedGradients"

# SmoothGrad noise level for standardized tabular inputs
TABULAR_SG_SIGMA2 = 0.5
SG_SAMPLES = 50
IG_STEPS = 100


@dataclass
class SaliencyMap:
    scores: np.ndarray
    explained_class: int
    method: str = SIMPLE
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if not np.all(np.isfinite(self.scores)):
            raise ShapeError("saliency scores must be finite")

    @property
    def n_features(self):
        return self.scores.size

    def csv_rows(self):
        """``(feature_index, score)`` rows for CSV export."""
        return [(i, float(s)) for i, s in enumerate(self.scores)]


@dataclass
class Ranking:
    order: np.ndarray
    k: int

    @property
    def top(self):
        return self.order[:self.k]

    @property
    def rest(self):
        return self.order[self.k:]


def sort_features(scores, order_by="signed"):
    """Feature indices in descending importance; ties go to the lower index."""
    scores = np.asarray(scores, dtype=float)
    if order_by == "signed":
        key = -scores
    elif order_by == "magnitude":
        key = -np.abs(scores)
    else:
        raise UsageError(f"order_by must be 'signed' or 'magnitude', not {order_by!r}")
    return np.argsort(key, kind="stable")


def ranking(saliency, k, order_by="signed"):
    scores = saliency.scores if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if not 0 <= k <= scores.size:
        raise UsageError(f"k={k} outside [0, {scores.size}]")
    return Ranking(sort_features(scores, order_by), int(k))


def simple_gradient(model, x):
    c = predict(model, x)
    return SaliencyMap(input_gradient(model, x, c), c, SIMPLE)


def smoothgrad(model, x, M=SG_SAMPLES, sigma2=TABULAR_SG_SIGMA2, seed=0):
    """Mean simple gradient over ``M`` inputs with ``N(0, sigma2 I)`` noise.

    The explained class stays the one predicted at ``x``.
    """
    if M < 1:
        raise UsageError("SmoothGrad needs M >= 1 samples")
    if not sigma2 > 0:
        raise UsageError("sigma2 must be positive")
    x = _check_x(model, x)
    c = predict(model, x)
    rng = np.random.default_rng(seed)
    noisy = x + np.sqrt(sigma2) * rng.standard_normal((M, x.size))
    G = input_gradients(model, noisy, np.full(M, c))
    return SaliencyMap(G.mean(axis=0), c, SMOOTH,
                       {"M": int(M), "sigma2": float(sigma2), "seed": seed})


def integrated_gradients(model, x, baseline=None, steps=IG_STEPS):
    """Path-integrated gradients from ``baseline`` (default all zeros).

    The path integral is a midpoint Riemann sum over ``steps`` points.
    """
    if steps < 1:
        raise UsageError("steps must be >= 1")
    x = _check_x(model, x)
    x0 = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float)
    if x0.shape != x.shape:
        raise ShapeError("baseline must match x")
    c = predict(model, x)
    alphas = (np.arange(steps) + 0.5) / steps
    path = x0 + alphas[:, None] * (x - x0)
    G = input_gradients(model, path, np.full(steps, c))
    return SaliencyMap((x - x0) * G.mean(axis=0), c, INTEGRATED,
                       {"baseline": x0.tolist(), "steps": int(steps)})


def _check_pair(n, i, j):
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"feature pair ({i}, {j}) out of range for n={n}")


def gap(model, x, i, j, c=None):
    """``I(x)_i - I(x)_j`` for the simple-gradient explanation."""
    x = _check_x(model, x)
    _check_pair(x.size, i, j)
    c = predict(model, x) if c is None else _check_class(model, c)
    g = input_gradient(model, x, c)
    return float(g[i] - g[j])


def gap_input_gradient(model, x, i, j, c=None, step=None):
    """Input gradient of the gap: ``H(x)_i - H(x)_j`` via one Hessian-vector product."""
    x = _check_x(model, x)
    _check_pair(x.size, i, j)
    if i == j:
        raise UsageError("gap gradient needs two distinct features")
    c = predict(model, x) if c is None else _check_class(model, c)
    u = np.zeros_like(x)
    u[i], u[j] = 1.0, -1.0
    # H symmetric, so H (e_i - e_j) is the difference of rows i and j
    return hvp_batch(model, x[None, :], u[None, :], [c], step)[0]


def pair_weights(n, pairs):
    """Vector ``a`` with ``a . I(x) = sum over pairs of h(x, i, j)``."""
    a = np.zeros(n)
    for i, j in pairs:
        a[i] += 1.0
        a[j] -= 1.0
    return a


def topk_weights(rank):
    """Pair weights for every (top-k, rest) pair of a ranking."""
    n = rank.order.size
    a = np.zeros(n)
    a[rank.top] = n - rank.k
    a[rank.rest] = -rank.k
    return a
