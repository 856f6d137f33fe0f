import numpy as np
import pytest

from rankshield import _fallback, backend
from rankshield._fallback import HEAD_LOGIT, HEAD_PROB, MODE_XENT
from rankshield.model import Activation, DenseNet

kernels = pytest.importorskip("rankshield._kernels")


def _net(seed, act):
    rng = np.random.default_rng(seed)
    dims = (int(rng.integers(2, 10)),) + tuple(rng.integers(2, 12, size=rng.integers(1, 3))) + (
        int(rng.integers(2, 4)),)
    return DenseNet.initialize(dims, Activation(act, 4.0), seed=seed)


def test_backend_selected():
    assert backend.NAME in ("compiled", "python")


@pytest.mark.parametrize("act", ["relu", "softplus"])
@pytest.mark.parametrize("head", [HEAD_PROB, HEAD_LOGIT])
@pytest.mark.parametrize("seed", range(6))
def test_score_grads_parity(seed, act, head):
    net = _net(seed, act)
    rng = np.random.default_rng(seed + 50)
    X = rng.standard_normal((7, net.n_features))
    cls = rng.integers(0, net.n_classes, 7).astype(np.int64)
    args = (net.params, net._dims_arr, net.activation.code, 4.0, head, X, cls)
    for a, b in zip(kernels.score_grads(*args), _fallback.score_grads(*args)):
        np.testing.assert_allclose(np.asarray(a), b, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("act", ["relu", "softplus"])
@pytest.mark.parametrize("mode", [HEAD_PROB, HEAD_LOGIT, MODE_XENT])
@pytest.mark.parametrize("seed", range(6))
def test_param_grads_parity(seed, act, mode):
    net = _net(seed, act)
    rng = np.random.default_rng(seed + 80)
    X = rng.standard_normal((5, net.n_features))
    cls = rng.integers(0, net.n_classes, 5).astype(np.int64)
    w = rng.standard_normal(5)
    args = (net.params, net._dims_arr, net.activation.code, 4.0, mode, X, cls, w)
    v1, g1 = kernels.param_grads(*args)
    v2, g2 = _fallback.param_grads(*args)
    assert v1 == pytest.approx(v2, rel=1e-12, abs=1e-13)
    np.testing.assert_allclose(np.asarray(g1), g2, rtol=1e-11, atol=1e-13)


def test_empty_batch_parity():
    net = _net(0, "softplus")
    X = np.zeros((0, net.n_features))
    cls = np.zeros(0, dtype=np.int64)
    args = (net.params, net._dims_arr, net.activation.code, 4.0, HEAD_PROB, X, cls)
    for a, b in zip(kernels.score_grads(*args), _fallback.score_grads(*args)):
        assert np.asarray(a).shape == b.shape
