import csv
import io

import numpy as np
import pytest
from scipy.special import expit

from rankshield import metrics as MT
from rankshield.errors import ShapeError, UsageError
from rankshield.explain import simple_gradient
from rankshield.model import DenseNet, linear_model


@pytest.fixture
def const_net():
    return DenseNet([(np.zeros((2, 3)), np.array([1.0, 0.0]))])


def test_precision_at_k_examples():
    a = np.array([9.0, 8.0, 7.0, 1.0])
    assert MT.precision_at_k(a, np.array([9.0, 1.0, 7.0, 8.0]), 3) == pytest.approx(2 / 3)
    for k in range(1, 5):
        assert MT.precision_at_k(a, a, k) == 1.0
    assert MT.precision_at_k(a, -a, 2) == 0.0
    with pytest.raises(UsageError):
        MT.precision_at_k(a, a, 0)
    with pytest.raises(ShapeError):
        MT.precision_at_k(a, a[:3], 1)


def test_auc_examples():
    assert MT.auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75
    assert MT.auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert MT.auc([0.4] * 6, [0, 1] * 3) == 0.5
    with pytest.raises(UsageError):
        MT.auc([0.1, 0.2], [1, 1])


def test_auc_brute_force():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 5, 40).astype(float)
    y = rng.integers(0, 2, 40)
    pos, neg = s[y == 1], s[y == 0]
    pairs = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    assert MT.auc(s, y) == pytest.approx(pairs.mean(), abs=1e-12)


def test_dffot_linear(lin3):
    x = np.ones(3)
    frac, flipped = MT.dffot(lin3, x, simple_gradient(lin3, x))
    assert frac == pytest.approx(1 / 3) and flipped


def test_dffot_constant(const_net):
    assert MT.dffot(const_net, np.ones(3), np.array([3.0, 2.0, 1.0])) == (1.0, False)


def test_comp_suff_linear_closed_form(lin3):
    x = np.ones(3)
    s = simple_gradient(lin3, x)
    p = expit(2.0)
    assert MT.comp(lin3, x, s, K=[1, 2]) == pytest.approx(
        (abs(p - expit(-1.0)) + abs(p - expit(-3.0))) / 2, abs=1e-12)
    assert MT.suff(lin3, x, s, K=[1]) == pytest.approx(abs(p - expit(-1.0)), abs=1e-12)
    assert MT.suff(lin3, x, s, K=[3]) == 0.0


def test_comp_suff_degenerate(const_net):
    x = np.ones(3)
    s = np.array([1.0, 2.0, 3.0])
    assert MT.comp(const_net, x, s) == 0.0
    assert MT.suff(const_net, x, s) == 0.0
    dead = linear_model([0.0, 1.0, 1.0], 0.5)
    assert MT.comp(dead, x, np.array([5.0, 1.0, 0.0]), K=[1]) == 0.0
    with pytest.raises(UsageError):
        MT.comp(dead, x, s, K=[4])


def test_default_k_set():
    assert MT.default_k_set(4) == [1, 2, 3, 4]
    assert MT.default_k_set(100) == [1, 5, 10, 20, 50]


def test_correlation_examples():
    xs = np.arange(10.0)
    assert MT.correlation(xs, 2 * xs + 1, "pearson") == pytest.approx(1.0)
    assert MT.correlation(xs, xs[::-1]) == pytest.approx(-1.0)
    assert MT.correlation([1, 2, 3], [1, 3, 2]) == 0.5
    with pytest.raises(UsageError):
        MT.correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(UsageError):
        MT.correlation(xs, xs, "kendall")


def test_metric_report():
    r = MT.MetricReport(metadata={"k": 4})
    r.add("auc", [0.5, 1.0])
    r.add("p_at_k", [0.25, 0.75])
    assert r.aggregates == {"auc": 0.75, "p_at_k": 0.5}
    assert r.to_dict()["metadata"] == {"k": 4}
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["sample_id", "auc", "p_at_k"]
    assert rows[2] == ["1", "1.0", "0.75"]
