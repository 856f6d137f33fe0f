"""Training loops for plain and explanation-robust classifiers.

Every method minimizes mean cross-entropy plus a per-sample regularizer on
the saliency map of the labelled class:

=============  ==============================================================
Vanilla        no regularizer (ReLU network)
WD             ``lambda_wd * sum ||W||^2`` over weight matrices
SP             Vanilla loss on a softplus network
EstH           ``alpha * ||(grad f(x + kappa v) - grad f(x)) / kappa||``
ExactH         ``alpha * ||H(x)||_F`` from the full input Hessian
SSR            ``alpha * ||H(x)||_2`` by power iteration
AT             cross-entropy at ``x + delta*`` with ``delta*`` attacking the gaps
R2ET           ``-lambda1 * sum of (top-k, rest) gaps + lambda2 * ||H(x)||_2``
R2ET_noH       R2ET with ``lambda2 = 0``
R2ETmm         R2ET over k' minimal-gap pairs
R2ETmm_noH     R2ETmm with ``lambda2 = 0``
=============  ==============================================================

Parameter gradients of saliency quantities use finite-difference stencils
over input-space gradients (see ``model.param_grad_directional`` and
``model.param_grad_bilinear``). ReLU networks use the exact forms with the
activation pattern held fixed instead: a stencil that straddles a kink turns
the jump in the gradient into a spike that swamps the loss.
Power-iteration vectors are warm-started per training sample and held fixed
when differentiating the spectral norm.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from rankshield import metrics
from rankshield._fallback import MODE_XENT
from rankshield.errors import CapabilityError, ShapeError, TrainingError, UsageError
from rankshield.explain import sort_features
from rankshield.model import (EXACT_HESSIAN_MAX_DIM, Activation, DenseNet, ParamGradient,
                              exact_hvp_batch, exact_param_grad_bilinear,
                              exact_param_grad_directional, hvp_batch, param_grad_bilinear,
                              param_grad_directional, piecewise_linear,
                              power_iteration_batch)

log = logging.getLogger(__name__)

METHODS = ("Vanilla", "WD", "SP", "EstH", "ExactH", "SSR", "AT",
           "R2ET", "R2ET_noH", "R2ETmm", "R2ETmm_noH")
PAIR_SCHEMES = ("full", "anchor", "minimal_gap")
FULL_PAIRS_MAX_DIM = 64


@dataclass
class TrainConfig:
    method: str = "Vanilla"
    lr: float = 1e-2
    epochs: int = 300
    batch_size: int = 64
    seed: int = 0
    hidden: tuple = (32,)
    activation: str = "relu"
    rho: float = 10.0
    head: str = "softmax"
    optimizer: str = "sgd"
    # method parameters
    lambda_wd: float = 1e-3
    alpha: float = 0.01
    kappa: float = 1e-3
    power_iters: int = 3
    eps_at: float = 0.1
    inner_steps: int = 1
    lambda1: float = 0.1
    lambda2: float = 0.01
    k: int = 4
    k_prime: int = None
    pair_scheme: str = None
    reg_subsample: int = None   # regularize only this many samples per batch

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown training method {self.method!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.lr > 0:
            raise UsageError("lr must be positive")
        if int(self.epochs) < 1 or int(self.batch_size) < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        for name in ("lambda_wd", "alpha", "lambda1", "lambda2", "eps_at"):
            if not getattr(self, name) >= 0:
                raise UsageError(f"{name} must be >= 0")
        if not self.kappa > 0:
            raise UsageError("kappa must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise UsageError("optimizer must be 'sgd' or 'adam'")
        if self.pair_scheme is not None and self.pair_scheme not in PAIR_SCHEMES:
            raise UsageError(f"pair_scheme must be one of {PAIR_SCHEMES}")
        if self.k_prime is not None and self.k_prime > self.k:
            raise UsageError("k' must not exceed k")
        if self.method == "SP" and self.activation == "relu":
            self.activation = "softplus"
        self.epochs = int(self.epochs)
        self.batch_size = int(self.batch_size)

    @property
    def is_r2et(self):
        return self.method.startswith("R2ET")

    def effective(self):
        """``(lambda1, lambda2)`` after applying the ablation aliases."""
        l2 = 0.0 if self.method.endswith("_noH") else self.lambda2
        return self.lambda1, l2

    def scheme(self, n):
        if self.pair_scheme is not None:
            return self.pair_scheme
        if self.method.startswith("R2ETmm"):
            return "minimal_gap"
        return "full" if n <= FULL_PAIRS_MAX_DIM else "anchor"

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise UsageError(f"unknown training option(s): {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    auc: list = field(default_factory=list)
    regularizer: list = field(default_factory=list)
    mean_gap: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# pair selection

def select_pairs(scores, k, scheme="full", k_prime=None, order_by="signed"):
    """(top-k, rest) feature pairs under a selection scheme.

    ``anchor`` pairs rank ``k - i`` with rank ``k + i`` (1-based) for
    ``i = 1..k'``; ``minimal_gap`` greedily takes the ``k'`` smallest
    cross-boundary gaps with distinct ``i`` and distinct ``j``.
    """
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    if not 1 <= k < n:
        raise UsageError(f"pair selection needs 1 <= k < n, got k={k}, n={n}")
    order = sort_features(scores, order_by)
    top, rest = order[:k], order[k:]
    if scheme == "full":
        return [(int(i), int(j)) for i in top for j in rest]
    kp = k if k_prime is None else int(k_prime)
    if kp < 1 or kp > k:
        raise UsageError(f"k' must lie in [1, k], got {kp}")
    if scheme == "anchor":
        limit = min(k - 1, n - k)
        if kp > limit:
            if kp == k and limit >= 1:
                log.warning("anchor scheme: clamping k'=%d to %d", kp, limit)
                kp = limit
            else:
                raise UsageError(f"anchor scheme needs k' <= {limit}, got {kp}")
        return [(int(order[k - i - 1]), int(order[k + i - 1])) for i in range(1, kp + 1)]
    if scheme == "minimal_gap":
        vals = scores if order_by == "signed" else np.abs(scores)
        picks = greedy_min_gap(vals[top][:, None] - vals[rest][None, :], kp)
        return [(int(top[a]), int(rest[b])) for a, b in picks]
    raise UsageError(f"unknown pair scheme {scheme!r}")


def greedy_min_gap(G, count):
    """Greedy picks ``(a, b)`` of smallest ``G[a, b]`` with distinct rows and columns."""
    G = np.asarray(G, dtype=float)
    flat = np.argsort(G, axis=None, kind="stable")
    used_a, used_b, out = set(), set(), []
    for a, b in zip(*np.unravel_index(flat, G.shape)):
        if a in used_a or b in used_b:
            continue
        out.append((int(a), int(b)))
        used_a.add(a)
        used_b.add(b)
        if len(out) == count:
            break
    return out


def _pair_weight_rows(S, k, scheme, k_prime, order_by="signed"):
    """Row ``b`` holds ``a_b`` with ``a_b . I(x_b)`` the selected gap sum."""
    A = np.zeros_like(S)
    for b, s in enumerate(S):
        for i, j in select_pairs(s, k, scheme, k_prime, order_by):
            A[b, i] += 1.0
            A[b, j] -= 1.0
    return A


# ---------------------------------------------------------------------------
# regularizers (batched; each returns (mean value, flat gradient))

def _hvp(net, X, V, y):
    return exact_hvp_batch(net, X, V, y) if piecewise_linear(net) else hvp_batch(net, X, V, y)


def _grad_directional(net, Y, U, y, weights):
    if piecewise_linear(net):
        return exact_param_grad_directional(net, Y, U, y, weights)
    return param_grad_directional(net, Y, U, y, weights)


def _grad_bilinear(net, X, U, V, y, weights):
    if piecewise_linear(net):
        return exact_param_grad_bilinear(net, X, U, V, y, weights)
    return param_grad_bilinear(net, X, U, V, y, weights)


def _spectral(net, X, y, V0, iters, weight):
    """Mean ``||H(x)||_2`` and ``weight *`` its parameter gradient.

    ``V0`` holds warm-start vectors and is updated in place.
    """
    B = X.shape[0]
    if iters > 0:
        V0[:] = power_iteration_batch(net, X, y, iters=iters, tol=0.0, rng=_FixedStart(V0),
                                      hvp=_hvp)[1]
    HV = _hvp(net, X, V0, y)
    sigma = np.linalg.norm(HV, axis=1)
    ok = sigma > 0
    U = np.zeros_like(HV)
    U[ok] = HV[ok] / sigma[ok, None]
    w = np.where(ok, weight / B, 0.0)
    g = _grad_bilinear(net, X, U, V0, y, w) if np.any(ok) else np.zeros_like(net.params)
    return float(sigma.mean()), g


class _FixedStart:
    """Stands in for a generator so power iteration starts from given vectors."""

    def __init__(self, V):
        self.V = V

    def standard_normal(self, shape):
        V = self.V.copy()
        bad = np.linalg.norm(V, axis=1) == 0
        V[bad] = 1.0
        return V


def _gap_term(net, X, y, k, scheme, k_prime, weight):
    """Mean selected gap sum and ``weight *`` its parameter gradient."""
    B = X.shape[0]
    S = net.score_grads(X, y)[2]
    A = _pair_weight_rows(S, k, scheme, k_prime)
    val = float(np.einsum("bi,bi->b", A, S).mean())
    g = _grad_directional(net, X, A, y, np.full(B, weight / B))
    return val, g


def r2et_regularizer(net, X, y, k, lambda1, lambda2, pair_scheme="full", k_prime=None,
                     power_iters=3, V0=None, seed=0):
    """``-lambda1 * mean gap sum + lambda2 * mean ||H||_2`` and its gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64).ravel()
    n = X.shape[1]
    if not 1 <= k < n:
        raise UsageError(f"k must satisfy 1 <= k < n, got k={k}")
    value, grad = 0.0, np.zeros_like(net.params)
    if lambda1 > 0:
        gap, g = _gap_term(net, X, y, k, pair_scheme, k_prime, -lambda1)
        value -= lambda1 * gap
        grad += g
    if lambda2 > 0:
        if V0 is None:
            V0 = np.random.default_rng(seed).standard_normal(X.shape)
            power_iters = max(power_iters, 30)
        sig, g = _spectral(net, X, y, V0, power_iters, lambda2)
        value += lambda2 * sig
        grad += g
    return value, ParamGradient(grad, net.dims)


def _weight_decay(net, lam):
    grad = np.zeros_like(net.params)
    val = 0.0
    off = 0
    for d_in, d_out in zip(net.dims[:-1], net.dims[1:]):
        W = net.params[off:off + d_in * d_out]
        val += float(W @ W)
        grad[off:off + d_in * d_out] = 2.0 * lam * W
        off += d_in * d_out + d_out
    return lam * val, grad


def _est_h(net, X, y, alpha, kappa):
    B = X.shape[0]
    G = net.score_grads(X, y)[2]
    s = np.sign(G)
    ns = np.linalg.norm(s, axis=1)
    V = np.divide(s, ns[:, None], out=np.zeros_like(s), where=ns[:, None] > 0)
    Gk = net.score_grads(X + kappa * V, y)[2]
    D = (Gk - G) / kappa
    nd = np.linalg.norm(D, axis=1)
    U = np.divide(D, nd[:, None], out=np.zeros_like(D), where=nd[:, None] > 0)
    w = alpha / (B * kappa)
    g = _grad_directional(net, np.vstack([X + kappa * V, X]), np.vstack([U, U]),
                               np.concatenate([y, y]),
                               np.concatenate([np.full(B, w), np.full(B, -w)]))
    return float(nd.mean()) * alpha, g


def _exact_h(net, X, y, alpha):
    B, n = X.shape
    if n > EXACT_HESSIAN_MAX_DIM:
        raise CapabilityError(f"ExactH limited to n <= {EXACT_HESSIAN_MAX_DIM}")
    E = np.tile(np.eye(n), (B, 1))
    Xr = np.repeat(X, n, axis=0)
    yr = np.repeat(y, n)
    H = _hvp(net, Xr, E, yr).reshape(B, n, n)
    H = 0.5 * (H + H.transpose(0, 2, 1))
    fro = np.sqrt(np.einsum("bij,bij->b", H, H))
    safe = np.where(fro > 0, fro, 1.0)
    Rr = (H / safe[:, None, None]).reshape(B * n, n)
    w = np.repeat(np.where(fro > 0, alpha / B, 0.0), n)
    # grad ||H||_F = sum_i grad (e_i' H r_i) with r_i = H_i / ||H||_F frozen
    g = _grad_bilinear(net, Xr, E, Rr, yr, w)
    return alpha * float(fro.mean()), g


def baseline_regularizer(net, X, y, config, V0=None):
    """Penalty and gradient of a baseline defense for one batch."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64).ravel()
    m = config.method
    if m == "WD":
        v, g = _weight_decay(net, config.lambda_wd)
    elif m == "EstH":
        v, g = _est_h(net, X, y, config.alpha, config.kappa)
    elif m == "ExactH":
        v, g = _exact_h(net, X, y, config.alpha)
    elif m == "SSR":
        iters = config.power_iters
        if V0 is None:
            V0 = np.random.default_rng(config.seed).standard_normal(X.shape)
            iters = max(iters, 30)
        sig, g = _spectral(net, X, y, V0, iters, config.alpha)
        v = config.alpha * sig
    else:
        v, g = 0.0, np.zeros_like(net.params)
    return v, ParamGradient(g, net.dims)


def at_inner_attack(net, X, y, k, eps_at, inner_steps=1):
    """Perturbations ``delta`` with ``||delta||_2 <= eps_at`` that shrink the gaps.

    Projected normalized ascent on ``-sum of (top-k, rest) gaps``, pairs taken
    from the ranking at the clean input; one step is the fast variant.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64).ravel()
    delta = np.zeros_like(X)
    if eps_at == 0:
        return delta
    if not eps_at > 0:
        raise UsageError("eps_at must be >= 0")
    n = X.shape[1]
    S = net.score_grads(X, y)[2]
    A = np.zeros_like(S)
    for b, s in enumerate(S):
        order = sort_features(s)
        A[b, order[:k]] = n - k
        A[b, order[k:]] = -k
    step = eps_at / max(1, int(inner_steps))
    for _ in range(max(1, int(inner_steps))):
        g = -_hvp(net, X + delta, A, y)
        ng = np.linalg.norm(g, axis=1)
        move = ng > 0
        delta[move] += step * g[move] / ng[move, None]
        nd = np.linalg.norm(delta, axis=1)
        over = nd > eps_at
        delta[over] *= (eps_at / nd[over])[:, None]
    return delta


# ---------------------------------------------------------------------------
# optimizer and loop

class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, w, g):
        if self.m is None:
            self.m = np.zeros_like(w)
            self.v = np.zeros_like(w)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return w - self.lr * mh / (np.sqrt(vh) + self.eps)


def sgd_step(params, grad, lr):
    return params - lr * grad


def _architecture(config, n, C):
    act = Activation(config.activation, config.rho)
    return (n, *config.hidden, C), act


def _regularize(net, config, X, y, idx, state):
    if config.is_r2et:
        l1, l2 = config.effective()
        if l1 == 0 and l2 == 0:
            return 0.0, None
        V0 = state["V"][idx] if l2 > 0 else None
        v, g = r2et_regularizer(net, X, y, config.k, l1, l2, config.scheme(X.shape[1]),
                                config.k_prime, config.power_iters, V0)
        if V0 is not None:
            state["V"][idx] = V0
        return v, g.flat
    if config.method == "SSR":
        if config.alpha == 0:
            return 0.0, None
        V0 = state["V"][idx]
        v, g = baseline_regularizer(net, X, y, config, V0)
        state["V"][idx] = V0
        return v, g.flat
    if config.method in ("WD", "EstH", "ExactH"):
        lam = config.lambda_wd if config.method == "WD" else config.alpha
        if lam == 0:
            return 0.0, None
        v, g = baseline_regularizer(net, X, y, config)
        return v, g.flat
    return 0.0, None


def mean_gap(net, X, y, k):
    """Mean over samples of the (top-k, rest) gap sum of the labelled class."""
    S = net.score_grads(np.asarray(X, dtype=float), np.asarray(y, dtype=np.int64))[2]
    n = S.shape[1]
    srt = -np.sort(-S, axis=1)
    return float(((n - k) * srt[:, :k].sum(axis=1) - k * srt[:, k:].sum(axis=1)).mean())


def train(config, dataset, init=None, callback=None):
    """Train a classifier on ``dataset`` (features ``X``, labels ``y``).

    Returns ``(net, history)``. Deterministic given ``config.seed``.
    """
    X = np.asarray(dataset.features, dtype=float)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError("dataset features/labels have inconsistent shapes")
    N, n = X.shape
    C = max(2, int(y.max()) + 1)
    if np.unique(y).size < 2:
        raise UsageError("training needs at least two classes present")
    if config.is_r2et and not 1 <= config.k < n:
        raise UsageError(f"k must satisfy 1 <= k < n, got k={config.k}")
    ss = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, reg_ss = ss.spawn(3)
    dims, act = _architecture(config, n, C)
    net = init if init is not None else DenseNet.initialize(
        dims, act, seed=int(init_ss.generate_state(1)[0]), head=config.head)
    shuffle = np.random.default_rng(shuffle_ss)
    state = {"V": np.random.default_rng(reg_ss).standard_normal((N, n))}
    opt = _Adam(config.lr) if config.optimizer == "adam" else None
    hist = TrainHistory()
    B = config.batch_size
    params = net.params.copy()
    for epoch in range(config.epochs):
        perm = shuffle.permutation(N)
        tot_loss = tot_reg = 0.0
        for start in range(0, N, B):
            idx = perm[start:start + B]
            Xb, yb = X[idx], y[idx]
            wts = np.full(idx.size, 1.0 / idx.size)
            if config.method == "AT":
                Xc = Xb + at_inner_attack(net, Xb, yb, config.k, config.eps_at,
                                          config.inner_steps)
            else:
                Xc = Xb
            loss, grad = net.param_grads(Xc, yb, wts, mode=MODE_XENT)
            ri = idx
            if config.reg_subsample and config.reg_subsample < idx.size:
                ri = idx[:config.reg_subsample]
            reg, rg = _regularize(net, config, X[ri], y[ri], ri, state)
            if rg is not None:
                grad = grad + rg
            if not (math.isfinite(loss) and math.isfinite(reg) and np.all(np.isfinite(grad))):
                raise TrainingError(f"training diverged in epoch {epoch}", epoch=epoch)
            params = opt.step(params, grad) if opt else sgd_step(params, grad, config.lr)
            net = net.with_params(params)
            tot_loss += loss * idx.size
            tot_reg += reg * idx.size
        if not np.all(np.isfinite(params)):
            raise TrainingError(f"training diverged in epoch {epoch}", epoch=epoch)
        P = net.proba_batch(X)
        hist.loss.append(tot_loss / N)
        hist.regularizer.append(tot_reg / N)
        hist.accuracy.append(float(np.mean(P.argmax(axis=1) == y)))
        hist.auc.append(metrics.auc(P[:, 1], y) if C == 2 else float("nan"))
        hist.mean_gap.append(mean_gap(net, X, y, min(config.k, n - 1)))
        if callback is not None:
            callback(epoch, net, hist)
    net.meta = {"method": config.method, "seed": config.seed, "epochs": config.epochs}
    return net, hist
