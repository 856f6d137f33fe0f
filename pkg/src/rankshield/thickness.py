"""Monte-Carlo estimates of ranking thickness and its Hessian-based bounds.

Pairwise thickness of features ``(i, j)`` around ``x`` averages, over
endpoints ``x'`` drawn from a neighbourhood distribution, the fraction of the
segment ``x(t) = (1 - t) x + t x'`` along which ``i`` still outranks ``j``
(``indicator`` variant), or the mean gap along the segment (``relaxed``).
Top-k thickness averages the pairwise quantity over all (top-k, rest) pairs
ranked at the original input.
"""

from dataclasses import dataclass, field

import numpy as np

from rankshield.errors import EstimationError, UsageError
from rankshield.explain import _check_pair, gap, gap_input_gradient, sort_features
from rankshield.model import _check_x, hvp_batch, input_gradients, predict

VARIANTS = ("indicator", "relaxed")
DEFAULT_M1 = 32
DEFAULT_M2 = 8


@dataclass(frozen=True)
class PerturbDistribution:
    """Neighbourhood of ``x`` that endpoints ``x'`` are drawn from.

    ``kind`` is ``uniform_ball`` (radius ``epsilon``), ``gaussian``
    (variance ``sigma2``) or ``adversarial`` (the endpoint of an
    explanation attack described by ``attack``).
    """

    kind: str = "uniform_ball"
    epsilon: float = 0.1
    sigma2: float = 0.0
    attack: object = None

    def __post_init__(self):
        if self.kind == "uniform_ball" and not self.epsilon > 0:
            raise UsageError("uniform ball needs epsilon > 0")
        if self.kind == "gaussian" and not self.sigma2 > 0:
            raise UsageError("gaussian needs sigma2 > 0")
        if self.kind not in ("uniform_ball", "gaussian", "adversarial"):
            raise UsageError(f"unknown perturbation kind {self.kind!r}")

    @classmethod
    def uniform(cls, epsilon):
        return cls("uniform_ball", epsilon=epsilon)

    @classmethod
    def gaussian(cls, sigma2):
        return cls("gaussian", sigma2=sigma2)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "uniform_ball":
            d["epsilon"] = self.epsilon
        elif self.kind == "gaussian":
            d["sigma2"] = self.sigma2
        return d


@dataclass
class ThicknessEstimate:
    value: float
    std_error: float
    M1: int
    M2: int
    variant: str
    per_endpoint: np.ndarray = field(default=None, repr=False)


@dataclass
class ThicknessBounds:
    lower: float
    upper: float
    epsilon: float
    lipschitz_samples: int
    gap: float = 0.0
    lipschitz: tuple = ()


def uniform_ball(rng, center, radius, count):
    """``count`` points uniformly distributed in the l2 ball."""
    n = center.size
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=count) ** (1.0 / n)
    return center + d * r[:, None]


def sample_endpoints(model, x, D, M1, rng):
    if D.kind == "uniform_ball":
        return uniform_ball(rng, x, D.epsilon, M1)
    if D.kind == "gaussian":
        return x + np.sqrt(D.sigma2) * rng.standard_normal((M1, x.size))
    from rankshield.attacks import run_attack
    try:
        res = run_attack(model, x, D.attack)
    except Exception as exc:  # noqa: BLE001 - reported with cause
        raise EstimationError(f"adversarial endpoint failed: {exc}") from exc
    return res.x_adv[None, :]


def _path_gradients(model, x, endpoints, c, M2):
    """Saliency maps at stratified midpoints; shape ``(M1, M2, n)``."""
    t = (np.arange(M2) + 0.5) / M2
    pts = x + t[None, :, None] * (endpoints - x)[:, None, :]
    M1, n = endpoints.shape
    G = input_gradients(model, pts.reshape(M1 * M2, n), np.full(M1 * M2, c))
    return G.reshape(M1, M2, n)


def _estimate(per_endpoint, M1, M2, variant):
    m = per_endpoint.size
    se = float(per_endpoint.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return ThicknessEstimate(float(per_endpoint.mean()), se, m, M2, variant, per_endpoint)


def _validate(M1, M2, variant):
    if M1 < 1 or M2 < 1:
        raise UsageError("M1 and M2 must be >= 1")
    if variant not in VARIANTS:
        raise UsageError(f"variant must be one of {VARIANTS}")


def pairwise_thickness(model, x, D, i, j, M1=DEFAULT_M1, M2=DEFAULT_M2,
                       variant="indicator", seed=0, c=None):
    _validate(M1, M2, variant)
    x = _check_x(model, x)
    _check_pair(x.size, i, j)
    if i == j:
        raise UsageError("pairwise thickness needs i != j")
    c = predict(model, x) if c is None else c
    rng = np.random.default_rng(seed)
    ends = sample_endpoints(model, x, D, M1, rng)
    G = _path_gradients(model, x, ends, c, M2)
    h = G[:, :, i] - G[:, :, j]
    vals = (h >= 0).astype(float) if variant == "indicator" else h
    return _estimate(vals.mean(axis=1), M1, M2, variant)


def topk_pairs(scores, k, order_by="signed"):
    order = sort_features(scores, order_by)
    return order[:k], order[k:]


def topk_thickness(model, x, D, k, M1=DEFAULT_M1, M2=DEFAULT_M2,
                   variant="indicator", seed=0, order_by="signed", c=None):
    """Average pairwise thickness over all (top-k, rest) pairs at ``x``.

    All pairs share the same endpoints and path points.
    """
    _validate(M1, M2, variant)
    x = _check_x(model, x)
    if not 1 <= k < x.size:
        raise UsageError(f"top-k thickness needs 1 <= k < n, got k={k}")
    c = predict(model, x) if c is None else c
    base = input_gradients(model, x[None, :], [c])[0]
    top, rest = topk_pairs(base, k, order_by)
    rng = np.random.default_rng(seed)
    ends = sample_endpoints(model, x, D, M1, rng)
    G = _path_gradients(model, x, ends, c, M2)
    h = G[:, :, top][:, :, :, None] - G[:, :, rest][:, :, None, :]
    if variant == "indicator":
        h = (h >= 0).astype(float)
    per = h.reshape(h.shape[0], -1).mean(axis=1)
    return _estimate(per, M1, M2, variant)


def thickness_bounds(model, x, i, j, epsilon, S=32, seed=0, c=None):
    """Lower/upper bounds on relaxed pairwise thickness in an ``epsilon`` ball.

    The local Lipschitz constants ``L_i`` are the largest Hessian-row norms
    seen at ``x`` and ``S`` uniform samples of the ball, so the upper bound
    is itself an estimate (the sampled maximum can only under-shoot).
    """
    if not epsilon > 0:
        raise UsageError("epsilon must be positive")
    if S < 1:
        raise UsageError("S must be >= 1")
    x = _check_x(model, x)
    c = predict(model, x) if c is None else c
    h = gap(model, x, i, j, c)
    lower = h - 0.5 * epsilon * float(np.linalg.norm(gap_input_gradient(model, x, i, j, c)))
    rng = np.random.default_rng(seed)
    pts = np.vstack([x[None, :], uniform_ball(rng, x, epsilon, S)])
    Ls = []
    for f in (i, j):
        E = np.zeros_like(pts)
        E[:, f] = 1.0
        rows = hvp_batch(model, pts, E, np.full(len(pts), c))
        Ls.append(float(np.linalg.norm(rows, axis=1).max()))
    upper = h + epsilon * (Ls[0] + Ls[1])
    return ThicknessBounds(lower, upper, float(epsilon), int(S), h, tuple(Ls))


def sample_thickness(model, X, k, D, M1=DEFAULT_M1, M2=DEFAULT_M2, seed=0,
                     variant="indicator", order_by="signed"):
    """Per-sample top-k thickness estimates with seeds derived from ``seed``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise UsageError("empty dataset")
    return [topk_thickness(model, x, D, k, M1, M2, variant,
                           seed=[int(seed), idx], order_by=order_by)
            for idx, x in enumerate(X)]


def model_thickness(model, X, k, D, M1=DEFAULT_M1, M2=DEFAULT_M2, seed=0,
                    variant="indicator", order_by="signed"):
    """Mean top-k thickness over a dataset (indicator variant by default)."""
    ests = sample_thickness(model, X, k, D, M1, M2, seed, variant, order_by)
    return float(np.mean([e.value for e in ests]))
