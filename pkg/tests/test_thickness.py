import math

import numpy as np
import pytest

from rankshield import thickness as T
from rankshield.attacks import AttackConfig
from rankshield.errors import UsageError
from rankshield.model import linear_model

from conftest import random_softplus_net

BALL = T.PerturbDistribution.uniform(0.1)


def test_distribution_validation():
    with pytest.raises(UsageError):
        T.PerturbDistribution.uniform(0.0)
    with pytest.raises(UsageError):
        T.PerturbDistribution.gaussian(-1.0)
    with pytest.raises(UsageError):
        T.PerturbDistribution("laplace")
    assert T.PerturbDistribution.uniform(0.3).to_dict()["epsilon"] == 0.3


def test_uniform_ball_inside_radius():
    rng = np.random.default_rng(0)
    pts = T.uniform_ball(rng, np.ones(3), 0.5, 2000)
    r = np.linalg.norm(pts - 1.0, axis=1)
    assert r.max() <= 0.5
    # volume-uniform radius: P(r <= R/2) = 1/8 in three dimensions
    assert abs((r <= 0.25).mean() - 0.125) < 0.03


def test_quadratic_relaxed_matches_gap(quad, x11):
    est = T.pairwise_thickness(quad, x11, BALL, 0, 1, M1=2500, M2=4, variant="relaxed", seed=1)
    assert est.M1 * est.M2 >= 10_000
    assert abs(est.value - 1.4) <= 3 * est.std_error
    ind = T.pairwise_thickness(quad, x11, BALL, 0, 1, M1=500, M2=4, variant="indicator")
    assert ind.value == 1.0 and ind.std_error == 0.0


def test_linear_indicator_is_one(lin3):
    for D in (BALL, T.PerturbDistribution.gaussian(4.0)):
        assert T.pairwise_thickness(lin3, np.ones(3), D, 0, 2, M1=64).value == 1.0
        assert T.topk_thickness(lin3, np.ones(3), D, 1, M1=64).value == 1.0


def test_pairwise_errors(quad, x11):
    with pytest.raises(UsageError):
        T.pairwise_thickness(quad, x11, BALL, 0, 0)
    with pytest.raises(UsageError):
        T.pairwise_thickness(quad, x11, BALL, 0, 1, M1=0)
    with pytest.raises(UsageError):
        T.pairwise_thickness(quad, x11, BALL, 0, 1, variant="soft")
    with pytest.raises(IndexError):
        T.pairwise_thickness(quad, x11, BALL, 0, 5)


def test_topk_two_features_equals_pairwise():
    net = random_softplus_net(2, n=2, hidden=4)
    x = np.array([0.3, -0.2])
    order = T.topk_pairs(T.input_gradients(net, x[None], [T.predict(net, x)])[0], 1)
    i, j = int(order[0][0]), int(order[1][0])
    D = T.PerturbDistribution.uniform(0.5)
    for variant in T.VARIANTS:
        a = T.topk_thickness(net, x, D, 1, M1=40, M2=5, variant=variant, seed=9)
        b = T.pairwise_thickness(net, x, D, i, j, M1=40, M2=5, variant=variant, seed=9)
        assert a.value == b.value


def test_topk_decomposes_into_pairs():
    net = random_softplus_net(4, n=5, hidden=6)
    x = np.linspace(-1, 1, 5)
    D = T.PerturbDistribution.uniform(0.8)
    c = T.predict(net, x)
    top, rest = T.topk_pairs(T.input_gradients(net, x[None], [c])[0], 2)
    for variant in T.VARIANTS:
        whole = T.topk_thickness(net, x, D, 2, M1=30, M2=6, variant=variant, seed=5).value
        parts = [T.pairwise_thickness(net, x, D, int(i), int(j), M1=30, M2=6,
                                      variant=variant, seed=5).value
                 for i in top for j in rest]
        assert abs(whole - np.mean(parts)) <= 1e-10


def test_topk_k_range(quad, x11):
    with pytest.raises(UsageError):
        T.topk_thickness(quad, x11, BALL, 2)


def test_bounds_quadratic(quad, x11):
    b = T.thickness_bounds(quad, x11, 0, 1, 0.1)
    assert b.lower == pytest.approx(1.4 - 0.05 * math.sqrt(5.0), abs=1e-6)
    assert b.lower == pytest.approx(1.2882, abs=1e-4)
    assert b.lipschitz == pytest.approx((2.0, 1.0), abs=1e-6)
    assert b.upper == pytest.approx(1.7, abs=1e-6)


def test_bounds_linear_collapse(lin3):
    b = T.thickness_bounds(lin3, np.ones(3), 0, 2, 0.2)
    assert b.lower == pytest.approx(2.0, abs=1e-8)
    assert b.upper == pytest.approx(2.0, abs=1e-8)
    with pytest.raises(UsageError):
        T.thickness_bounds(lin3, np.ones(3), 0, 2, 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_bound_sandwich_small(seed):
    net = random_softplus_net(seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(net.n_features)
    eps = 0.2
    est = T.pairwise_thickness(net, x, T.PerturbDistribution.uniform(eps), 0, 1,
                               M1=400, M2=8, variant="relaxed", seed=seed)
    b = T.thickness_bounds(net, x, 0, 1, eps, S=32, seed=seed)
    slack = 3 * est.std_error
    assert b.lower - slack <= est.value <= b.upper + slack


def test_model_thickness_single_sample_and_linear(small_net, lin3):
    x = np.linspace(-0.5, 0.5, 5)
    D = T.PerturbDistribution.uniform(0.5)
    one = T.model_thickness(small_net, x[None], 2, D, M1=16, seed=4)
    direct = T.topk_thickness(small_net, x, D, 2, M1=16, seed=[4, 0]).value
    assert one == direct
    X = np.random.default_rng(0).standard_normal((4, 3))
    assert T.model_thickness(lin3, X, 1, D, M1=8) == 1.0
    with pytest.raises(UsageError):
        T.model_thickness(lin3, np.zeros((0, 3)), 1, D)


def test_seed_determinism(small_net):
    x = np.linspace(-0.5, 0.5, 5)
    D = T.PerturbDistribution.gaussian(0.3)
    a = T.topk_thickness(small_net, x, D, 2, seed=11)
    b = T.topk_thickness(small_net, x, D, 2, seed=11)
    assert a.value == b.value and a.std_error == b.std_error


def test_adversarial_endpoint(quad, x11):
    D = T.PerturbDistribution("adversarial", attack=AttackConfig(
        step_size=0.01, max_iters=100, pred_epsilon=10.0, k=1))
    est = T.pairwise_thickness(quad, x11, D, 0, 1, M2=100)
    # the attack crosses the gap at iteration 63 of 100: about 63% of the path stays ordered
    assert 0.55 <= est.value <= 0.7
