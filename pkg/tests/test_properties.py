import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankshield import attacks as A
from rankshield import data as D
from rankshield import explain as E
from rankshield import metrics as MT
from rankshield import model as M
from rankshield import thickness as T
from rankshield.model import Activation, DenseNet, quadratic_test_model

from conftest import random_softplus_net

FAST = settings(max_examples=40, deadline=None,
                suppress_health_check=[HealthCheck.too_slow])
seeds = st.integers(0, 2 ** 31 - 1)
finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def score_vectors(min_size=2, max_size=12):
    return st.integers(min_size, max_size).flatmap(
        lambda n: arrays(np.float64, n, elements=finite))


# ---------------------------------------------------------------------------
# model core

@FAST
@given(seed=seeds, n=st.integers(2, 16))
def test_input_gradient_vs_central_differences(seed, n):
    net = random_softplus_net(seed % 10_000, n=n)
    x = np.random.default_rng(seed).standard_normal(n)
    c = M.predict(net, x)
    g = M.input_gradient(net, x, c)
    h = 1e-5
    fd = np.array([(M.score(net, x + h * e, c) - M.score(net, x - h * e, c)) / (2 * h)
                   for e in np.eye(n)])
    assert np.linalg.norm(g - fd) <= 1e-4 * max(1.0, np.linalg.norm(g))


@FAST
@given(diag=arrays(np.float64, 3, elements=st.floats(-3, 3)),
       off=arrays(np.float64, 3, elements=st.floats(-3, 3)),
       x=arrays(np.float64, 3, elements=finite),
       v=arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_hvp_quadratic_closed_form(diag, off, x, v):
    assume(np.linalg.norm(v) > 1e-3)
    A_ = np.diag(diag)
    A_[0, 1] = A_[1, 0] = off[0]
    A_[0, 2] = A_[2, 0] = off[1]
    A_[1, 2] = A_[2, 1] = off[2]
    q = M.QuadraticModel(A_, np.array([0.1, -0.2, 0.3]), 10.0 * (1 + abs(x).sum()) ** 2)
    np.testing.assert_allclose(M.hvp(q, x, v, 0), A_ @ v, atol=1e-6)


@FAST
@given(seed=seeds)
def test_hessian_symmetry(seed):
    net = random_softplus_net(seed % 10_000)
    x = np.random.default_rng(seed).standard_normal(net.n_features)
    H = np.array([M.hessian_row(net, x, i, 0) for i in range(net.n_features)])
    assert np.abs(H - H.T).max() <= 1e-5


@settings(max_examples=15, deadline=None)
@given(seed=seeds)
def test_gap_gradient_mode_agreement(seed):
    net = random_softplus_net(seed % 10_000, n=4, hidden=5, depth=2)
    x = np.random.default_rng(seed).standard_normal(4)
    a = M.param_gradient_of_gap(net, x, 0, 3, 1, "finite_difference").flat
    b = M.param_gradient_of_gap(net, x, 0, 3, 1, "double_backprop").flat
    assert np.linalg.norm(a - b) <= 1e-3 * max(np.linalg.norm(b), 1e-6)


@FAST
@given(seed=seeds)
def test_forward_and_gradient_determinism(seed):
    net = DenseNet.initialize((5, 7, 3), Activation("relu"), seed=seed % 1000)
    x = np.random.default_rng(seed).standard_normal(5)
    t1, t2 = M.forward(net, x), M.forward(net, x)
    assert t1.probs.tobytes() == t2.probs.tobytes()
    assert M.input_gradient(net, x, 2).tobytes() == M.input_gradient(net, x, 2).tobytes()


# ---------------------------------------------------------------------------
# explanations and metrics

@FAST
@given(s=score_vectors(), scale=st.floats(0.01, 100), mode=st.sampled_from(["signed", "magnitude"]))
def test_ranking_permutation_and_scale_invariance(s, scale, mode):
    order = E.sort_features(s, mode)
    assert sorted(order.tolist()) == list(range(s.size))
    assume(np.all(np.isfinite(s * scale)))
    keys = s if mode == "signed" else np.abs(s)
    # rescaling can merge nearly equal keys through rounding; compare only distinct keys
    assume(np.unique(keys).size == np.unique(keys * scale).size)
    assert np.array_equal(order, E.sort_features(s * scale, mode))


@FAST
@given(data=st.data())
def test_precision_at_k_properties(data):
    a = data.draw(score_vectors())
    b = data.draw(arrays(np.float64, a.size, elements=finite))
    k = data.draw(st.integers(1, a.size))
    assert MT.precision_at_k(a, a, k) == 1.0
    p = MT.precision_at_k(a, b, k)
    assert p == MT.precision_at_k(b, a, k)
    assert 0.0 <= p <= 1.0
    assert MT.precision_at_k(3.0 * a, b, k) == p


@FAST
@given(data=st.data())
def test_auc_monotone_invariance(data):
    n = data.draw(st.integers(2, 30))
    s = data.draw(arrays(np.float64, n, elements=st.floats(-3, 3)))
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    assume(0 < y.sum() < n)
    a = MT.auc(s, y)
    assert 0.0 <= a <= 1.0
    t = np.exp(s) * 2 + 1
    assume(np.unique(t).size == np.unique(s).size)   # rounding may merge near-ties
    assert MT.auc(t, y) == a


@FAST
@given(seed=seeds)
def test_removal_metric_ranges(seed):
    net = random_softplus_net(seed % 10_000)
    x = np.random.default_rng(seed).standard_normal(net.n_features)
    s = E.simple_gradient(net, x)
    frac, _ = MT.dffot(net, x, s)
    n = net.n_features
    assert frac in {i / n for i in range(1, n + 1)}
    assert 0.0 <= MT.comp(net, x, s) <= 1.0
    assert 0.0 <= MT.suff(net, x, s) <= 1.0


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_smoothgrad_limit_and_ig_completeness(seed):
    net = random_softplus_net(seed % 10_000, n=int(seed % 15) + 2)
    x = np.random.default_rng(seed).standard_normal(net.n_features)
    sg = E.smoothgrad(net, x, M=5, sigma2=1e-12, seed=seed)
    np.testing.assert_allclose(sg.scores, E.simple_gradient(net, x).scores, atol=1e-6)
    ig = E.integrated_gradients(net, x, steps=100)
    c = ig.explained_class
    assert abs(ig.scores.sum() - (M.score(net, x, c) - M.score(net, 0 * x, c))) <= 1e-3


# ---------------------------------------------------------------------------
# thickness

@settings(max_examples=20, deadline=None)
@given(seed=seeds, eps=st.floats(0.01, 3.0))
def test_indicator_thickness_in_unit_interval(seed, eps):
    net = random_softplus_net(seed % 10_000)
    x = np.random.default_rng(seed).standard_normal(net.n_features)
    est = T.topk_thickness(net, x, T.PerturbDistribution.uniform(eps), 1, M1=8, M2=4, seed=seed)
    assert 0.0 <= est.value <= 1.0


@settings(max_examples=20, deadline=None)
@given(e1=st.floats(0.05, 2.0), e2=st.floats(0.05, 2.0))
def test_indicator_monotone_in_radius_for_linear_gap(e1, e2):
    lo, hi = sorted((e1, e2))
    q = quadratic_test_model()
    x = np.array([0.3, 0.8])   # gap 1.1 - 0.9 = 0.2, crossed within radius ~0.09
    th = [T.pairwise_thickness(q, x, T.PerturbDistribution.uniform(e), 0, 1,
                               M1=400, M2=8, seed=1).value for e in (lo, hi)]
    assert th[1] <= th[0] + 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_thickness_seed_determinism(seed):
    net = random_softplus_net(seed % 10_000)
    x = np.random.default_rng(seed).standard_normal(net.n_features)
    D_ = T.PerturbDistribution.gaussian(0.2)
    a = T.topk_thickness(net, x, D_, 1, M1=8, seed=seed, variant="relaxed")
    b = T.topk_thickness(net, x, D_, 1, M1=8, seed=seed, variant="relaxed")
    assert a.value == b.value


# ---------------------------------------------------------------------------
# attacks

@settings(max_examples=15, deadline=None)
@given(seed=seeds, method=st.sampled_from(["ERAttack", "MSEAttack"]),
       eps=st.floats(0.0, 0.2), step=st.floats(1e-3, 0.2))
def test_attack_constraint_and_budget(seed, method, eps, step):
    net = random_softplus_net(seed % 10_000, n=5)
    x = np.random.default_rng(seed).standard_normal(5)
    cfg = A.AttackConfig(method=method, k=2, step_size=step, max_iters=25, pred_epsilon=eps)
    r = A.run_attack(net, x, cfg)
    assert M.predict(net, r.x_adv) == M.predict(net, x)
    assert np.linalg.norm(M.forward(net, r.x_adv).probs - M.forward(net, x).probs) <= eps + 1e-12
    assert np.linalg.norm(r.x_adv - x) <= cfg.max_iters * step + 1e-9
    assert r.p_at_k_trajectory[0] == 1.0
    if r.first_flip_iter is not None and r.first_flip_iter < len(r.p_at_k_trajectory):
        t = r.first_flip_iter
        assert r.p_at_k_trajectory[t] < 1.0 and min(r.p_at_k_trajectory[:t] + [1.0]) == 1.0


@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_moo_monotone_and_classified(seed):
    net = random_softplus_net(seed % 10_000, n=4, hidden=5)
    x = np.random.default_rng(seed).standard_normal(4)
    cfg = A.AttackConfig(method="MooTr", k=2, step_size=0.05, max_iters=30, pred_epsilon=0.05)
    r = A.moo_tr_attack(net, x, cfg)
    assert r.verdict in A.VERDICTS and r.iters_run <= cfg.max_iters
    rows = np.array(r.merit_trajectory, dtype=float).reshape(-1, 4)
    for col in rows.T:
        live = col[~np.isnan(col)]
        assert np.all(np.diff(live) <= 1e-9)


# ---------------------------------------------------------------------------
# data

@settings(max_examples=25, deadline=None)
@given(seed=seeds, a=st.integers(1, 8), b=st.integers(0, 8), c=st.integers(0, 8))
def test_split_disjoint_exhaustive(seed, a, b, c):
    tot = a + b + c
    fr = (a / tot, b / tot, 1.0 - a / tot - b / tot)
    ds = D.Dataset(np.arange(60.0)[:, None], np.arange(60) % 2)
    try:
        parts = D.split(ds, fr, seed=seed % 1000)
    except D.UsageError:
        return
    ids = np.concatenate([p.features[:, 0] for p in parts])
    assert sorted(ids.tolist()) == list(range(60))


@FAST
@given(X=arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)),
       kind=st.sampled_from(["zscore", "minmax"]))
def test_normalize_round_trip(X, kind):
    ds = D.Dataset(X, [0, 1, 0, 1, 0])
    nd = D.normalize(ds, kind)
    assert np.max(np.abs(nd.raw_features() - X)) <= 1e-9
