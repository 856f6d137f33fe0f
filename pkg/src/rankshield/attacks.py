"""Attacks on top-k gradient explanations that keep the prediction fixed.

Three attacks are provided:

* ``ERAttack``: normalized descent on the sum of (top-k, rest) gaps.
* ``MSEAttack``: normalized ascent on ``||I(x') - I(x)||^2``.
* ``MooTr``: a trust-region multi-objective method treating every
  (top-k, rest) gap as its own objective. Each step solves a linear program
  built from first-order models of per-objective merit functions.

Output constraint: a candidate ``x'`` is acceptable only if
``predict(x') == predict(x)`` and ``||f(x') - f(x)||_2 <= pred_epsilon``,
where ``f`` is the probability vector (softmax head) or the logit vector
(logit head). Rejected steps leave ``x`` unchanged but still count as an
iteration.

Trajectory convention: entry ``t`` of ``p_at_k_trajectory`` is P@k at the
start of iteration ``t``, so the trajectory starts at 1.0 and has
``iters_run`` entries.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from rankshield.errors import AttackError, NumericError, UsageError
from rankshield.explain import sort_features
from rankshield.model import (Activation, DenseNet, _check_x, hvp_batch,
                              power_iteration_batch, predict)
from rankshield.simplex import OPTIMAL, linprog

METHODS = ("ERAttack", "MSEAttack", "MooTr")
VERDICTS = ("flip", "all-critical", "iteration-cap")
DELTA_FLOOR = 1e-8
MIN_STEP = 1e-12


@dataclass
class AttackConfig:
    method: str = "ERAttack"
    step_size: float = 1e-3
    max_iters: int = 1000
    pred_epsilon: float = 0.1
    k: int = 8
    seed: int = 0
    order_by: str = "signed"
    stop_at_flip: bool = False
    constraint: str = "reject"   # or "penalty" (gradient descent-ascent)
    surrogate_rho: float = None  # softplus sharpness for directions on ReLU nets

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown attack method {self.method!r}")
        if not self.step_size > 0:
            raise UsageError("step_size must be positive")
        if int(self.max_iters) < 1:
            raise UsageError("max_iters must be >= 1")
        if not self.pred_epsilon >= 0:
            raise UsageError("pred_epsilon must be >= 0")
        if int(self.k) < 1:
            raise UsageError("k must be >= 1")
        if self.order_by not in ("signed", "magnitude"):
            raise UsageError("order_by must be 'signed' or 'magnitude'")
        if self.constraint not in ("reject", "penalty"):
            raise UsageError("constraint must be 'reject' or 'penalty'")
        if self.surrogate_rho is not None and not self.surrogate_rho > 0:
            raise UsageError("surrogate_rho must be positive")
        self.max_iters = int(self.max_iters)
        self.k = int(self.k)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MooParams:
    gamma: float = 0.5
    eta: float = 0.1
    crit_epsilon: float = 1e-4
    delta0: float = None          # defaults to the attack step size
    target_level: float = None    # initial h - t; defaults to pred_epsilon

    def __post_init__(self):
        if not 0 < self.gamma < 1 or not 0 < self.eta < 1:
            raise UsageError("gamma and eta must lie in (0, 1)")
        if not self.crit_epsilon > 0:
            raise UsageError("crit_epsilon must be positive")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    p_at_k_trajectory: list
    first_flip_iter: int
    prediction_preserved: bool
    iters_run: int
    objective_trajectory: list
    final_p_at_k: float = 1.0
    method: str = ""
    verdict: str = ""
    n_rejected: int = 0
    merit_trajectory: list = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d["x_adv"] = np.asarray(self.x_adv).tolist()
        d["merit_trajectory"] = [[None if np.isnan(v) else float(v) for v in row]
                                 for row in self.merit_trajectory]
        return d


# ---------------------------------------------------------------------------
# shared pieces

class _Context:
    """Quantities fixed at the original input ``x0``.

    With ``k=None`` only the class and reference outputs are set up.
    """

    def __init__(self, model, x0, k=None, order_by="signed", eps=np.inf, surrogate_rho=None):
        self.model = model
        self.dmodel = _surrogate(model, surrogate_rho)
        self.x0 = x0
        self.c = predict(model, x0)
        self.order_by = order_by
        self.eps = float(eps)
        self.f0 = self.outputs(x0)
        if k is None:
            return
        n = x0.size
        if not k < n:
            raise UsageError(f"attack needs k < n, got k={k}, n={n}")
        self.k = k
        self.I0 = self.saliency(x0)
        order = sort_features(self.I0, order_by)
        self.top = order[:k]
        self.rest = order[k:]
        self.top_set = set(self.top.tolist())
        # pair weights: a . I = sum of (top, rest) gaps
        a = np.zeros(n)
        a[self.top] = n - k
        a[self.rest] = -k
        self.a = a

    @classmethod
    def for_config(cls, model, x0, config):
        return cls(model, x0, config.k, config.order_by, config.pred_epsilon,
                   config.surrogate_rho)

    def outputs(self, x):
        m = self.model
        X = x[None, :]
        return (m.proba_batch(X) if m.head == "softmax" else m.logits_batch(X))[0]

    def saliency(self, x):
        return self.model.score_grads(x[None, :], [self.c])[2][0]

    def signs(self, I):
        if self.order_by == "signed":
            return np.ones_like(I)
        return np.where(I >= 0, 1.0, -1.0)

    def p_at_k(self, I):
        top = sort_features(I, self.order_by)[:self.k]
        return len(self.top_set.intersection(top.tolist())) / self.k

    def feasible(self, x):
        if not np.all(np.isfinite(x)):
            return False
        if predict(self.model, x) != self.c:
            return False
        return float(np.linalg.norm(self.outputs(x) - self.f0)) <= self.eps

    def hvp(self, x, v):
        """Hessian-vector product on the direction model."""
        if not np.any(v):
            return np.zeros_like(v)
        return hvp_batch(self.dmodel, x[None, :], v[None, :], [self.c])[0]

    def dsaliency(self, x):
        return self.dmodel.score_grads(x[None, :], [self.c])[2][0]


def _surrogate(model, rho):
    """Softplus copy of a ReLU network used only to compute attack directions.

    ReLU saliency is piecewise constant up to the softmax factor, so its
    finite-difference Hessian barely sees the activation boundaries that
    actually reorder features.
    """
    if rho is None or not isinstance(model, DenseNet) or model.activation.kind != "relu":
        return model
    net = model.with_params(model.params)
    net.activation = Activation("softplus", rho)
    return net


def _first_flip(traj, final_p):
    for t, p in enumerate(traj):
        if p < 1.0:
            return t
    return len(traj) if final_p < 1.0 else None


def _pgd(model, x, config, objective, direction, name):
    """Normalized steepest-descent loop shared by ERAttack and MSEAttack.

    ``objective(ctx, x, I)`` gives the logged value and ``direction(ctx, x, I, t)``
    the (unnormalized) move; the step is ``x + step * d / ||d||``.
    """
    x0 = _check_x(model, x)
    ctx = _Context.for_config(model, x0, config)
    x = x0.copy()
    step = config.step_size
    penalty = config.constraint == "penalty"
    lam = 0.0
    best_x = x0.copy()
    traj, objs = [], []
    rejected = 0
    for t in range(config.max_iters):
        I = ctx.saliency(x)
        p = ctx.p_at_k(I)
        if config.stop_at_flip and p < 1.0:
            break
        traj.append(p)
        objs.append(float(objective(ctx, x, I)))
        d = direction(ctx, x, I, t)
        if penalty:
            d = d - lam * _residual_gradient(ctx, x)
        nd = float(np.linalg.norm(d))
        if not np.isfinite(nd):
            raise AttackError(f"non-finite attack direction at iteration {t}")
        if nd == 0.0:
            if penalty:
                continue
            # nothing moves from here on: the rest of the run is identical
            remaining = config.max_iters - t - 1
            traj.extend([p] * remaining)
            objs.extend([objs[-1]] * remaining)
            break
        cand = x + (step / nd) * d
        if penalty:
            x = cand
            viol = float(np.linalg.norm(ctx.outputs(x) - ctx.f0)) - ctx.eps
            lam = max(0.0, lam + viol / max(step, MIN_STEP))
            if ctx.feasible(x):
                best_x = x.copy()
            else:
                rejected += 1
        elif ctx.feasible(cand):
            x = cand
            step = config.step_size
        else:
            rejected += 1
            step = max(0.5 * step, MIN_STEP)
    if penalty:
        x = best_x
    I = ctx.saliency(x)
    final_p = ctx.p_at_k(I)
    ok = ctx.feasible(x)
    if not ok:  # pragma: no cover - guarded by rejection
        raise AttackError("attack produced an infeasible point")
    verdict = "flip" if final_p < 1.0 else "iteration-cap"
    return AttackResult(x, traj, _first_flip(traj, final_p), ok, len(traj), objs,
                        final_p, name, verdict, rejected)


def _residual_gradient(ctx, x):
    """Gradient of ``0.5 ||f(x) - f(x0)||^2`` (for the penalty mode)."""
    C = ctx.model.n_classes
    _, _, J = ctx.model.score_grads(np.tile(x, (C, 1)), np.arange(C))
    return J.T @ (ctx.outputs(x) - ctx.f0)


# ---------------------------------------------------------------------------
# ERAttack / MSE attack

def _er_objective(ctx, x, I):
    s = ctx.signs(I)
    return float(ctx.a @ (s * I))


def _er_direction(ctx, x, I, t):
    # gradient of sum of gaps is H (a * s); descend
    return -ctx.hvp(x, ctx.a * ctx.signs(I))


def erattack(model, x, config):
    """Minimize the sum of gaps between original top-k and remaining features."""
    return _pgd(model, x, config, _er_objective, _er_direction, "ERAttack")


def _mse_objective(ctx, x, I):
    return float(np.sum((I - ctx.I0) ** 2))


def _mse_direction(ctx, x, I, t):
    if ctx.dmodel is not ctx.model:
        I = ctx.dsaliency(x)
        diff = I - ctx.dsaliency(ctx.x0)
    else:
        diff = I - ctx.I0
    if np.any(diff):
        return 2.0 * ctx.hvp(x, diff)
    # zero gradient at the start: move along the dominant curvature direction
    sigma, V, _ = power_iteration_batch(ctx.dmodel, x[None, :], [ctx.c], iters=50,
                                        rng=np.random.default_rng(t))
    if not sigma[0] > 0:
        return np.zeros_like(x)
    return V[0]


def mse_attack(model, x, config):
    """Maximize the squared distance between original and perturbed saliency."""
    return _pgd(model, x, config, _mse_objective, _mse_direction, "MSEAttack")


# ---------------------------------------------------------------------------
# trust-region multi-objective attack

@dataclass
class MooState:
    pairs: np.ndarray            # (m, 2) feature pairs, fixed at x0
    active: np.ndarray           # indices into pairs
    targets: np.ndarray          # t_l for every pair
    delta: float
    gamma: float = 0.5
    eta: float = 0.1
    crit_epsilon: float = 1e-4

    def __post_init__(self):
        if not self.delta > 0:
            raise UsageError("trust radius must be positive")


def _lin_pieces(ctx, x, pairs):
    """Residual ``c``, Jacobian ``J``, gaps ``h`` and gap gradients ``G``."""
    m = ctx.model
    n = x.size
    C = m.n_classes
    # rows of J are the input gradients of each output f_a
    _, _, J = m.score_grads(np.tile(x, (C, 1)), np.arange(C))
    c = ctx.outputs(x) - ctx.f0
    I = ctx.saliency(x)
    s = ctx.signs(I)
    feats = np.unique(pairs)
    H = np.zeros((n, n))
    E = np.zeros((feats.size, n))
    E[np.arange(feats.size), feats] = 1.0
    H[feats] = hvp_batch(m, np.tile(x, (feats.size, 1)), E, np.full(feats.size, ctx.c))
    i, j = pairs[:, 0], pairs[:, 1]
    h = s[i] * I[i] - s[j] * I[j]
    G = s[i, None] * H[i] - s[j, None] * H[j]
    return c, J, h, G, I


def _merits(c, h, t):
    return np.abs(c).sum() + np.abs(h - t)


def solve_tr_moo(c, J, R, G, delta, no_increase=True):
    """Trust-region subproblem under an l-infinity box and l1 merits.

    Minimizes ``max_l ||c + J d||_1 + |R_l + G_l d|`` over ``||d||_inf <= delta``.
    Returns ``(d, alpha, model_merits)``.
    """
    c = np.asarray(c, float)
    R = np.asarray(R, float)
    G = np.atleast_2d(np.asarray(G, float))
    m, n = G.shape
    J = np.asarray(J, float).reshape(c.size, n)
    nc = c.size
    # variables: u' = d/delta + 1 in [0, 2] (n), alpha, p (nc), q (m)
    nv = n + 1 + nc + m
    ia, ip, iq = n, n + 1, n + 1 + nc
    Jh, Gh = delta * J, delta * G
    rows, rhs = [], []

    def row():
        r = np.zeros(nv)
        rows.append(r)
        return r

    for l in range(m):
        r = row(); r[ip:iq] = 1.0; r[iq + l] = 1.0; r[ia] = -1.0; rhs.append(0.0)
    for a in range(nc):
        r = row(); r[:n] = Jh[a]; r[ip + a] = -1.0; rhs.append(-c[a] + Jh[a].sum())
        r = row(); r[:n] = -Jh[a]; r[ip + a] = -1.0; rhs.append(c[a] - Jh[a].sum())
    for l in range(m):
        r = row(); r[:n] = Gh[l]; r[iq + l] = -1.0; rhs.append(-R[l] + Gh[l].sum())
        r = row(); r[:n] = -Gh[l]; r[iq + l] = -1.0; rhs.append(R[l] - Gh[l].sum())
    base = np.abs(c).sum() + np.abs(R)
    if no_increase and m > 1:
        for l in range(m):
            r = row(); r[ip:iq] = 1.0; r[iq + l] = 1.0; rhs.append(base[l])
    upper = np.full(nv, np.inf)
    upper[:n] = 2.0
    obj = np.zeros(nv)
    obj[ia] = 1.0
    res = linprog(obj, np.array(rows), np.array(rhs), upper=upper)
    if res.status != OPTIMAL:
        raise NumericError(f"trust-region subproblem {res.status}")
    alpha = float(res.fun)
    if base.max() - alpha <= 1e-12 * max(1.0, base.max()):
        # no predicted joint descent: stay put
        d = np.zeros(n)
        alpha = float(base.max())
    else:
        d = delta * (res.x[:n] - 1.0)
    lm = np.abs(c + J @ d).sum() + np.abs(R + G @ d)
    return d, alpha, lm


def solve_criticality(c, J, r, g, delta):
    """``chi = l(0) - min_{||d||_inf <= delta} l(d)`` for one objective."""
    d, best, _ = solve_tr_moo(c, J, [r], np.atleast_2d(g), delta, no_increase=False)
    l0 = float(np.abs(c).sum() + abs(r))
    return max(0.0, l0 - best)


def merit(model, x, x0, pair, t, order_by="signed"):
    """``||f(x) - f(x0)||_1 + |h(x) - t|`` for feature pair ``pair``."""
    x0 = _check_x(model, x0)
    x = _check_x(model, x)
    ctx = _Context(model, x0, order_by=order_by)
    I = ctx.saliency(x)
    s = ctx.signs(I)
    i, j = pair
    h = s[i] * I[i] - s[j] * I[j]
    return float(np.abs(ctx.outputs(x) - ctx.f0).sum() + abs(h - t))


def criticality(model, x, x0, pair, t, delta, order_by="signed"):
    if not delta > 0:
        raise UsageError("delta must be positive")
    x0 = _check_x(model, x0)
    x = _check_x(model, x)
    ctx = _Context(model, x0, order_by=order_by)
    c, J, h, G, _ = _lin_pieces(ctx, x, np.array([pair]))
    return solve_criticality(c, J, h[0] - t, G[0], delta)


def tr_moo_step(model, x, x0, state, order_by="signed"):
    """Trust-region step for the active objectives: ``(d, alpha)``."""
    if len(state.active) == 0:
        raise UsageError("no active objectives")
    x0 = _check_x(model, x0)
    x = _check_x(model, x)
    ctx = _Context(model, x0, order_by=order_by)
    P = state.pairs[state.active]
    c, J, h, G, _ = _lin_pieces(ctx, x, P)
    d, alpha, _ = solve_tr_moo(c, J, h - state.targets[state.active], G, state.delta)
    return d, alpha


def moo_tr_attack(model, x, config, moo_params=None):
    """Trust-region multi-objective attack on every (top-k, rest) gap.

    Terminates at the first flip, when every remaining objective is critical
    (or no joint descent exists and the radius hits its floor), or at the
    iteration cap. ``merit_trajectory`` holds, for each accepted step, the
    merit of every pair (NaN once removed).
    """
    mp = MooParams() if moo_params is None else moo_params
    x0 = _check_x(model, x)
    ctx = _Context.for_config(model, x0, config)
    pairs = np.array([(i, j) for i in ctx.top for j in ctx.rest], dtype=np.int64)
    m = len(pairs)
    delta0 = config.step_size if mp.delta0 is None else mp.delta0
    level = ctx.eps if mp.target_level is None else mp.target_level
    x = x0.copy()
    c, J, h, G, I = _lin_pieces(ctx, x, pairs)
    state = MooState(pairs, np.arange(m), h - level, delta0, mp.gamma, mp.eta,
                     mp.crit_epsilon)
    traj, objs, merits_log = [], [], []
    rejected = 0
    verdict = "iteration-cap"
    for it in range(config.max_iters):
        p = ctx.p_at_k(I)
        if p < 1.0 or h.min() < 0:
            verdict = "flip"
            break
        traj.append(p)
        act = state.active
        phi = _merits(c, h[act], state.targets[act])
        objs.append(float(phi.max()))
        R = h[act] - state.targets[act]
        d, alpha, lm = solve_tr_moo(c, J, R, G[act], state.delta)
        pred = float(phi.max()) - alpha
        # criticality test for objectives the step cannot improve
        stuck = np.flatnonzero(phi - lm <= state.crit_epsilon)
        drop = [l for l in stuck
                if h[act[l]] > 0
                and solve_criticality(c, J, R[l], G[act[l]], state.delta) <= state.crit_epsilon]
        if drop:
            state.active = np.delete(act, drop)
            if state.active.size == 0:
                verdict = "all-critical"
                break
            continue
        if pred <= 1e-14:
            verdict = "all-critical"
            break
        xn = x + d
        if ctx.feasible(xn):
            cn, Jn, hn, Gn, In = _lin_pieces(ctx, xn, pairs)
            phin = _merits(cn, hn[act], state.targets[act])
            ratio = (float(phi.max()) - float(phin.max())) / pred
            accept = ratio >= state.eta and np.all(phin <= phi + 1e-12)
        else:
            accept = False
        if accept:
            t_new = np.minimum(state.targets[act], hn[act] - (phi - np.abs(cn).sum()))
            state.targets[act] = t_new
            x, c, J, h, G, I = xn, cn, Jn, hn, Gn, In
            row = np.full(m, np.nan)
            row[act] = _merits(c, h[act], state.targets[act])
            merits_log.append(row)
            state.delta = min(delta0, state.delta / state.gamma)
        else:
            rejected += 1
            state.delta *= state.gamma
            if state.delta < DELTA_FLOOR:
                verdict = "all-critical"
                break
    final_p = ctx.p_at_k(I)
    if verdict == "iteration-cap" and (final_p < 1.0 or h.min() < 0):
        verdict = "flip"
    ok = ctx.feasible(x)
    if not ok:  # pragma: no cover - guarded by the acceptance test
        raise AttackError("attack produced an infeasible point")
    return AttackResult(x, traj, _first_flip(traj, final_p), ok, len(traj), objs,
                        final_p, "MooTr", verdict, rejected, merits_log)


# ---------------------------------------------------------------------------
# drivers

def run_attack(model, x, config, moo_params=None):
    if config.method == "ERAttack":
        return erattack(model, x, config)
    if config.method == "MSEAttack":
        return mse_attack(model, x, config)
    return moo_tr_attack(model, x, config, moo_params)


def _flip_one(args):
    model, x, config = args
    try:
        r = run_attack(model, x, config)
    except (AttackError, NumericError, UsageError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return r, None


def first_flip_scan(model, X, config, jobs=1, return_errors=False):
    """Iterations to first flip per sample (``max_iters + 1`` when none).

    The attack stops at the first flip. Failed samples get the sentinel and
    their error message is collected; results keep the sample order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise UsageError("first-flip scan needs at least one sample")
    cfg = AttackConfig(**{**config.to_dict(), "stop_at_flip": True})
    from rankshield.parallel import ordered_map
    out = ordered_map(_flip_one, [(model, x, cfg) for x in X], jobs)
    sentinel = cfg.max_iters + 1
    iters = np.array([sentinel if r is None or r.first_flip_iter is None
                      else r.first_flip_iter for r, _ in out], dtype=np.int64)
    errors = {i: e for i, (_, e) in enumerate(out) if e is not None}
    return (iters, errors) if return_errors else iters
