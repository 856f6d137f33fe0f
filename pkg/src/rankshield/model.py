"""Dense feedforward classifiers and their first/second-order input derivatives.

A model maps an input ``x`` (length ``n``) to ``C`` class logits and softmax
probabilities. The *explained score* ``f(x)_c`` is either the probability of
class ``c`` (``head="softmax"``, the default) or the raw logit
(``head="logit"``). Saliency maps, gaps and Hessians are all taken of this
score with respect to the input.

Second-order quantities are Hessian-free: a Hessian-vector product is a
central difference of two input gradients. ReLU networks additionally get
exact products with the activation pattern held fixed (``exact_hvp_batch``
and friends), which training uses.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from rankshield import backend
from rankshield._fallback import (HEAD_LOGIT, HEAD_PROB, MODE_XENT, RELU,
                                  SOFTPLUS, activate, activate_grad, forward as
                                  _layer_forward, sigmoid, softmax, unpack)
from rankshield.errors import CapabilityError, ShapeError, UsageError

FORMAT_VERSION = 1
EXACT_HESSIAN_MAX_DIM = 64
HEADS = ("softmax", "logit")


@dataclass(frozen=True)
class Activation:
    """Hidden-layer nonlinearity: ``relu`` or ``softplus`` with sharpness ``rho``."""

    kind: str = "relu"
    rho: float = 10.0

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("relu", "softplus"):
            raise UsageError(f"unknown activation {self.kind!r}")
        if kind == "softplus" and not (self.rho > 0 and math.isfinite(self.rho)):
            raise UsageError("softplus sharpness rho must be positive")

    @property
    def code(self):
        return RELU if self.kind == "relu" else SOFTPLUS

    def __call__(self, z):
        return activate(np.asarray(z, dtype=float), self.code, self.rho)

    def derivative(self, z):
        return activate_grad(np.asarray(z, dtype=float), self.code, self.rho)

    def to_dict(self):
        return {"kind": self.kind, "rho": float(self.rho)}


@dataclass
class ForwardTrace:
    pre_activations: list
    activations: list
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class ParamGradient:
    """Gradient with respect to every weight and bias of a :class:`DenseNet`.

    Stored flat in the network's packing order; :attr:`layers` gives
    per-layer ``(dW, db)`` views.
    """

    flat: np.ndarray
    dims: tuple

    @property
    def layers(self):
        Ws, bs = unpack(self.flat, self.dims)
        return list(zip(Ws, bs))

    def norm(self):
        return float(np.linalg.norm(self.flat))

    def __add__(self, other):
        return ParamGradient(self.flat + other.flat, self.dims)

    def __sub__(self, other):
        return ParamGradient(self.flat - other.flat, self.dims)

    def __mul__(self, scalar):
        return ParamGradient(self.flat * float(scalar), self.dims)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, net):
        return cls(np.zeros_like(net.params), net.dims)


class Model:
    """Interface shared by :class:`DenseNet` and the closed-form test models.

    Subclasses implement :meth:`logits_batch` and :meth:`score_grads`.
    """

    n_features: int
    n_classes: int
    head: str = "softmax"

    def logits_batch(self, X):
        raise NotImplementedError

    def score_grads(self, X, classes):
        """Return ``(probs, scores, grads)`` for a batch of inputs."""
        raise NotImplementedError

    def proba_batch(self, X):
        return softmax(self.logits_batch(X))

    def predict_batch(self, X):
        # argmax returns the lowest index among ties
        return np.argmax(self.proba_batch(X), axis=1)


class DenseNet(Model):
    """Feedforward classifier with a softmax head.

    ``layers`` is a list of ``(W, b)`` with ``W`` of shape ``[d_out, d_in]``.
    """

    def __init__(self, layers, activation=None, head="softmax", meta=None):
        if activation is None:
            activation = Activation()
        if head not in HEADS:
            raise UsageError(f"head must be one of {HEADS}")
        if not layers:
            raise ShapeError("a network needs at least one layer")
        dims = [int(np.shape(layers[0][0])[1])]
        chunks = []
        for l, (W, b) in enumerate(layers):
            W = np.asarray(W, dtype=float)
            b = np.asarray(b, dtype=float)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {l}: weight/bias shapes {W.shape}, {b.shape}")
            if W.shape[1] != dims[-1]:
                raise ShapeError(f"layer {l}: expects {W.shape[1]} inputs, "
                                 f"previous layer gives {dims[-1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {l}: non-finite parameters")
            dims.append(W.shape[0])
            chunks.extend([W.ravel(), b])
        self.dims = tuple(dims)
        self._dims_arr = np.asarray(dims, dtype=np.int64)
        self.params = np.ascontiguousarray(np.concatenate(chunks))
        self.activation = activation
        self.head = head
        self.meta = dict(meta or {})

    @property
    def n_features(self):
        return self.dims[0]

    @property
    def n_classes(self):
        return self.dims[-1]

    @property
    def layers(self):
        Ws, bs = unpack(self.params, self.dims)
        return list(zip(Ws, bs))

    @property
    def n_params(self):
        return self.params.size

    @classmethod
    def initialize(cls, dims, activation=None, seed=0, head="softmax"):
        """Uniform weights in ``±sqrt(6 / fan_in)``, zero biases."""
        rng = np.random.default_rng(seed)
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / d_in)
            layers.append((rng.uniform(-bound, bound, size=(d_out, d_in)),
                           np.zeros(d_out)))
        return cls(layers, activation, head)

    def with_params(self, flat):
        """A copy of this architecture carrying the given flat parameters."""
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.params.shape:
            raise ShapeError("parameter vector does not match the architecture")
        new = object.__new__(DenseNet)
        new.dims = self.dims
        new._dims_arr = self._dims_arr
        new.params = np.ascontiguousarray(flat.copy())
        new.activation = self.activation
        new.head = self.head
        new.meta = dict(self.meta)
        return new

    @property
    def head_code(self):
        return HEAD_PROB if self.head == "softmax" else HEAD_LOGIT

    def logits_batch(self, X):
        Ws, bs = unpack(self.params, self.dims)
        pre, _ = _layer_forward(Ws, bs, self.activation.code, self.activation.rho,
                                np.asarray(X, dtype=float))
        return pre[-1]

    def score_grads(self, X, classes):
        X = np.ascontiguousarray(X, dtype=float)
        classes = np.ascontiguousarray(classes, dtype=np.int64)
        return backend.score_grads(self.params, self._dims_arr, self.activation.code,
                                   float(self.activation.rho), self.head_code, X, classes)

    def param_grads(self, X, classes, weights, mode=None):
        """``(value, flat_grad)`` of ``sum_b weights[b] * s(x_b)`` over parameters."""
        if mode is None:
            mode = self.head_code
        X = np.ascontiguousarray(X, dtype=float)
        classes = np.ascontiguousarray(classes, dtype=np.int64)
        weights = np.ascontiguousarray(weights, dtype=float)
        return backend.param_grads(self.params, self._dims_arr, self.activation.code,
                                   float(self.activation.rho), mode, X, classes, weights)

    # serialization -------------------------------------------------------

    def to_dict(self):
        d = {
            "version": FORMAT_VERSION,
            "input_dim": self.n_features,
            "n_classes": self.n_classes,
            "activation": self.activation.to_dict(),
            "layers": [{"w": W.tolist(), "b": b.tolist()} for W, b in self.layers],
        }
        if self.head != "softmax":
            d["head"] = self.head
        if self.meta:
            d["meta"] = self.meta
        return d


@dataclass
class QuadraticModel(Model):
    """Closed-form test model with score ``0.5 x'Ax + b'x + c0``.

    Logits are ``(score, 0)``, so class 0 is predicted when the score is
    non-negative. The explained score of class 0 is the raw quadratic; class 1
    has the constant score 0.
    """

    A: np.ndarray
    b: np.ndarray
    c0: float = 0.0
    head: str = field(default="logit")

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        n = self.b.shape[0]
        if self.A.shape != (n, n):
            raise ShapeError("A must be square and match b")
        if self.head != "logit":
            raise UsageError("quadratic models explain the raw score")
        self.A = 0.5 * (self.A + self.A.T)

    @property
    def n_features(self):
        return self.b.shape[0]

    n_classes = 2

    def _score(self, X):
        return 0.5 * np.einsum("bi,ij,bj->b", X, self.A, X) + X @ self.b + self.c0

    def logits_batch(self, X):
        X = np.asarray(X, dtype=float)
        s = self._score(X)
        return np.stack([s, np.zeros_like(s)], axis=1)

    def score_grads(self, X, classes):
        X = np.asarray(X, dtype=float)
        classes = np.asarray(classes)
        logits = self.logits_batch(X)
        probs = softmax(logits)
        on = (classes == 0)
        scores = np.where(on, logits[:, 0], 0.0)
        grads = (X @ self.A + self.b) * on[:, None]
        return probs, scores, grads

    # no trainable weights: regularizers still evaluate, with empty gradients
    dims = ()

    @property
    def params(self):
        return np.zeros(0)

    def param_grads(self, X, classes, weights, mode=None):
        s = self.score_grads(X, classes)[1]
        return float(np.dot(weights, s)), np.zeros(0)

    def to_dict(self):
        return {"version": FORMAT_VERSION, "kind": "quadratic",
                "input_dim": self.n_features, "n_classes": 2,
                "A": self.A.tolist(), "b": self.b.tolist(), "c0": float(self.c0)}


def quadratic_test_model():
    """``f = x1^2 + 0.5 x1 + 0.5 x2^2 + 0.1 x2``: Hessian ``diag(2, 1)``."""
    return QuadraticModel(A=np.diag([2.0, 1.0]), b=np.array([0.5, 0.1]))


def linear_model(w, bias=0.0, head="logit"):
    """One-layer two-class net with logits ``(w.x + bias, 0)``."""
    w = np.asarray(w, dtype=float)
    W = np.vstack([w, np.zeros_like(w)])
    return DenseNet([(W, np.array([bias, 0.0]))], head=head)


# ---------------------------------------------------------------------------
# serialization

def model_from_dict(d):
    if d.get("version") != FORMAT_VERSION:
        raise UsageError(f"unsupported model format version {d.get('version')!r}")
    if d.get("kind", "dense") == "quadratic":
        return QuadraticModel(A=np.array(d["A"], dtype=float),
                              b=np.array(d["b"], dtype=float), c0=d.get("c0", 0.0))
    act = d.get("activation", {"kind": "relu"})
    net = DenseNet([(np.array(L["w"], dtype=float), np.array(L["b"], dtype=float))
                    for L in d["layers"]],
                   Activation(act["kind"], act.get("rho", 10.0)),
                   head=d.get("head", "softmax"), meta=d.get("meta"))
    if net.n_features != d["input_dim"] or net.n_classes != d["n_classes"]:
        raise ShapeError("declared input_dim/n_classes disagree with the layers")
    return net


def dumps(model):
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(model.to_dict())


def loads(text):
    return model_from_dict(json.loads(text))


def save(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------------------
# validation helpers

def _check_x(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_features,):
        raise ShapeError(f"expected input of length {model.n_features}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("input contains non-finite values")
    return x


def _check_class(model, c):
    if not (0 <= int(c) < model.n_classes):
        raise IndexError(f"class {c} out of range for {model.n_classes} classes")
    return int(c)


def default_step(x):
    """Finite-difference step ``1e-3 * max(1, ||x||)``."""
    return 1e-3 * max(1.0, float(np.linalg.norm(x)))


# ---------------------------------------------------------------------------
# first order

def forward(model, x):
    x = _check_x(model, x)
    if isinstance(model, DenseNet):
        Ws, bs = unpack(model.params, model.dims)
        pre, acts = _layer_forward(Ws, bs, model.activation.code,
                                   model.activation.rho, x[None, :])
        pre = [z[0] for z in pre]
        acts = [a[0] for a in acts]
    else:
        pre, acts = [], [x]
    logits = model.logits_batch(x[None, :])[0]
    probs = softmax(logits[None, :])[0]
    return ForwardTrace(pre, acts, logits, probs)


def predict(model, x):
    x = _check_x(model, x)
    return int(model.predict_batch(x[None, :])[0])


def score(model, x, c):
    """The explained score ``f(x)_c`` (probability or logit per the head)."""
    x = _check_x(model, x)
    c = _check_class(model, c)
    return float(model.score_grads(x[None, :], [c])[1][0])


def input_gradient(model, x, c):
    """Exact reverse-mode gradient of ``f(x)_c`` with respect to ``x``."""
    x = _check_x(model, x)
    c = _check_class(model, c)
    return model.score_grads(x[None, :], [c])[2][0]


def input_gradients(model, X, classes):
    """Batched :func:`input_gradient`."""
    return model.score_grads(np.asarray(X, dtype=float), classes)[2]


def param_gradient(net, X, y):
    """Gradient of the mean cross-entropy over a batch."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64).ravel()
    if X.shape[0] == 0:
        raise UsageError("empty batch")
    if X.shape[0] != y.shape[0]:
        raise ShapeError("features and labels disagree in length")
    if np.any(y < 0) or np.any(y >= net.n_classes):
        raise UsageError("label out of range")
    w = np.full(X.shape[0], 1.0 / X.shape[0])
    _, g = net.param_grads(X, y, w, mode=MODE_XENT)
    return ParamGradient(g, net.dims)


# ---------------------------------------------------------------------------
# second order (Hessian-free)

def hvp_batch(model, X, V, classes, step=None):
    """Central-difference Hessian-vector products for a batch.

    Rows of ``V`` with zero norm give zero products.
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    norms = np.linalg.norm(V, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = V / safe[:, None]
    if step is None:
        steps = 1e-3 * np.maximum(1.0, np.linalg.norm(X, axis=1))
    else:
        steps = np.full(X.shape[0], float(step))
    P = np.concatenate([X + steps[:, None] * U, X - steps[:, None] * U])
    cls = np.concatenate([classes, classes])
    G = input_gradients(model, P, cls)
    B = X.shape[0]
    return (G[:B] - G[B:]) * (norms / (2.0 * steps))[:, None]


def hvp(model, x, v, c, step=None):
    """Hessian of ``f(x)_c`` times ``v`` by central differences of gradients."""
    x = _check_x(model, x)
    c = _check_class(model, c)
    v = np.asarray(v, dtype=float)
    if v.shape != x.shape:
        raise ShapeError("v must match x")
    if not np.linalg.norm(v) > 0:
        raise UsageError("hvp needs a nonzero direction")
    if step is not None and not step > 0:
        raise UsageError("step must be positive")
    return hvp_batch(model, x[None, :], v[None, :], [c], step)[0]


def hessian_row(model, x, i, c, step=None):
    x = _check_x(model, x)
    if not 0 <= i < x.size:
        raise IndexError(f"feature {i} out of range")
    e = np.zeros_like(x)
    e[i] = 1.0
    return hvp(model, x, e, c, step)


def exact_hessian(model, x, c, step=None):
    """Dense input Hessian assembled from ``n`` rows and symmetrized."""
    x = _check_x(model, x)
    c = _check_class(model, c)
    n = x.size
    if n > EXACT_HESSIAN_MAX_DIM:
        raise CapabilityError(f"exact Hessian limited to n <= {EXACT_HESSIAN_MAX_DIM}")
    H = hvp_batch(model, np.tile(x, (n, 1)), np.eye(n), np.full(n, c), step)
    return 0.5 * (H + H.T)


def power_iteration_batch(model, X, classes, iters=30, tol=1e-6, rng=None, step=None,
                          hvp=None):
    """Largest |eigenvalue| of each input Hessian by power iteration.

    Returns ``(sigma, V, HV)``: the estimates, the final unit vectors and
    their Hessian products. ``hvp(model, X, V, classes)`` replaces the
    finite-difference product when given.
    """
    X = np.asarray(X, dtype=float)
    B, n = X.shape
    rng = np.random.default_rng(0) if rng is None else rng
    V = rng.standard_normal((B, n))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    sigma = np.zeros(B)
    HV = np.zeros_like(V)
    for _ in range(max(1, int(iters))):
        HV = hvp_batch(model, X, V, classes, step) if hvp is None else hvp(model, X, V, classes)
        new = np.linalg.norm(HV, axis=1)
        done = np.abs(new - sigma) <= tol * np.maximum(new, 1e-12)
        sigma = new
        nz = new > 0
        V[nz] = HV[nz] / new[nz, None]
        if np.all(done | ~nz):
            break
    return sigma, V, HV


def hessian_spectral_norm(model, x, c, iters=100, tol=1e-9, seed=0, step=None):
    """Spectral norm of the input Hessian of ``f(x)_c``."""
    if iters < 1:
        raise UsageError("iters must be >= 1")
    x = _check_x(model, x)
    c = _check_class(model, c)
    sigma, _, _ = power_iteration_batch(model, x[None, :], [c], iters, tol,
                                        np.random.default_rng(seed), step)
    return float(sigma[0])


# ---------------------------------------------------------------------------
# parameter gradients of input-derivative quantities

def _unit_rows(U):
    norms = np.linalg.norm(U, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return U / safe[:, None], norms


def param_grad_directional(net, Y, U, classes, weights, step=None):
    """``sum_b weights[b] * grad_w (u_b . grad_x f(y_b)_{c_b})`` by central differences."""
    Y = np.asarray(Y, dtype=float)
    Uh, norms = _unit_rows(np.asarray(U, dtype=float))
    s = (1e-3 * np.maximum(1.0, np.linalg.norm(Y, axis=1)) if step is None
         else np.full(Y.shape[0], float(step)))
    coef = np.asarray(weights, dtype=float) * norms / (2.0 * s)
    P = np.concatenate([Y + s[:, None] * Uh, Y - s[:, None] * Uh])
    cls = np.concatenate([classes, classes])
    _, g = net.param_grads(P, cls, np.concatenate([coef, -coef]))
    return g


def param_grad_bilinear(net, X, U, V, classes, weights, step=None):
    """``sum_b weights[b] * grad_w (u_b' H(x_b) v_b)`` with a four-point stencil."""
    X = np.asarray(X, dtype=float)
    Uh, nu = _unit_rows(np.asarray(U, dtype=float))
    Vh, nv = _unit_rows(np.asarray(V, dtype=float))
    s = (1e-3 * np.maximum(1.0, np.linalg.norm(X, axis=1)) if step is None
         else np.full(X.shape[0], float(step)))
    coef = np.asarray(weights, dtype=float) * nu * nv / (4.0 * s * s)
    su, sv = s[:, None] * Uh, s[:, None] * Vh
    P = np.concatenate([X + su + sv, X + su - sv, X - su + sv, X - su - sv])
    cls = np.concatenate([classes] * 4)
    _, g = net.param_grads(P, cls, np.concatenate([coef, -coef, -coef, coef]))
    return g


# ---------------------------------------------------------------------------
# exact curvature for ReLU networks
#
# With the activation pattern held fixed a ReLU net is linear in x up to the
# head, so the score Hessian is J' S J with J the masked logit Jacobian and S
# the Hessian of the head. These forms are exact wherever the pattern is
# locally constant (almost everywhere). Input-space stencils straddle kinks
# and then divide an O(1) jump by the squared step.

def piecewise_linear(model):
    return isinstance(model, DenseNet) and model.activation.kind == "relu"


def _pl_forward(net, X, directions):
    """Hidden activations, masks, logits and masked tangents per direction."""
    Ws, bs = unpack(net.params, net.dims)
    acts, masks = [X], []
    tans = [[U] for U in directions]
    a = X
    for l, (W, b) in enumerate(zip(Ws, bs)):
        z = a @ W.T + b
        last = l == len(Ws) - 1
        if not last:
            m = (z > 0).astype(float)
            masks.append(m)
            a = z * m
            acts.append(a)
        for t in tans:
            zt = t[-1] @ W.T
            t.append(zt if last else zt * masks[-1])
    return Ws, acts, masks, z, [t[-1] for t in tans], [t[:-1] for t in tans]


def _head_terms(net, Z, classes):
    """``(p_c, v = e_c - p, p)`` for the softmax head, ``None`` for logits."""
    if net.head != "softmax":
        return None
    P = softmax(Z)
    pc = P[np.arange(len(Z)), classes]
    V = -P
    V[np.arange(len(Z)), classes] += 1.0
    return pc, V, P


def _head_hess_apply(H, T):
    """Rows of ``S T`` where ``S`` is the head Hessian."""
    if H is None:
        return np.zeros_like(T)
    pc, V, P = H
    vt = np.einsum("bi,bi->b", V, T)
    pt = np.einsum("bi,bi->b", P, T)
    return pc[:, None] * (V * vt[:, None] - P * T + P * pt[:, None])


def _pl_backward(net, Ws, masks, streams, grad):
    """Accumulate ``sum outer(adjoint, input)`` over layers for each stream.

    ``streams`` holds ``(adjoint at the logits, layer inputs)`` pairs; the
    first stream also feeds the biases.
    """
    gWs, gbs = unpack(grad, net.dims)
    adj = [s[0] for s in streams]
    for l in range(len(Ws) - 1, -1, -1):
        for s, (_, inputs) in enumerate(streams):
            gWs[l] += adj[s].T @ inputs[l]
        gbs[l] += adj[0].sum(axis=0)
        if l > 0:
            adj = [(g @ Ws[l]) * masks[l - 1] for g in adj]
    return grad


def exact_hvp_batch(net, X, V, classes):
    X = np.asarray(X, dtype=float)
    classes = np.asarray(classes, dtype=np.int64)
    Ws, _, masks, Z, (T,), _ = _pl_forward(net, X, [np.asarray(V, dtype=float)])
    g = _head_hess_apply(_head_terms(net, Z, classes), T)
    for l in range(len(Ws) - 1, -1, -1):
        g = g @ Ws[l]
        if l > 0:
            g = g * masks[l - 1]
    return g


def exact_param_grad_directional(net, Y, U, classes, weights):
    """``sum_b weights[b] * grad_w (u_b . grad_x f(y_b)_{c_b})`` for a ReLU net."""
    Y = np.asarray(Y, dtype=float)
    classes = np.asarray(classes, dtype=np.int64)
    w = np.asarray(weights, dtype=float)[:, None]
    Ws, acts, masks, Z, (T,), (tin,) = _pl_forward(net, Y, [np.asarray(U, dtype=float)])
    H = _head_terms(net, Z, classes)
    if H is None:
        gz = np.zeros_like(Z)
        gz[np.arange(len(Z)), classes] = 1.0
    else:
        gz = H[0][:, None] * H[1]
    zbar = w * _head_hess_apply(H, T)
    return _pl_backward(net, Ws, masks, [(zbar, acts), (w * gz, tin)],
                        np.zeros_like(net.params))


def exact_param_grad_bilinear(net, X, U, V, classes, weights):
    """``sum_b weights[b] * grad_w (u_b' H(x_b) v_b)`` for a ReLU net."""
    X = np.asarray(X, dtype=float)
    classes = np.asarray(classes, dtype=np.int64)
    Ws, acts, masks, Z, (A, B), (uin, vin) = _pl_forward(
        net, X, [np.asarray(U, dtype=float), np.asarray(V, dtype=float)])
    H = _head_terms(net, Z, classes)
    if H is None:
        return np.zeros_like(net.params)
    w = np.asarray(weights, dtype=float)[:, None]
    pc, Vh, P = H
    ac = A[np.arange(len(Z)), classes]
    bc = B[np.arange(len(Z)), classes]
    pa = np.einsum("bi,bi->b", P, A)
    pb = np.einsum("bi,bi->b", P, B)
    q = np.einsum("bi,bi,bi->b", P, A, B)
    val = pc * ((ac - pa) * (bc - pb) - q + pa * pb)
    dpa = P * A - P * pa[:, None]
    dpb = P * B - P * pb[:, None]
    dq = P * A * B - P * q[:, None]
    # gradient of a' S(z) b over the logits z
    zbar = val[:, None] * Vh + pc[:, None] * (
        (2 * pb - bc)[:, None] * dpa + (2 * pa - ac)[:, None] * dpb - dq)
    return _pl_backward(net, Ws, masks,
                        [(w * zbar, acts), (w * _head_hess_apply(H, B), uin),
                         (w * _head_hess_apply(H, A), vin)],
                        np.zeros_like(net.params))


def _double_backprop(net, x, u, c):
    """Exact ``grad_w (u . grad_x f(x)_c)`` by reverse mode over a tangent pass."""
    Ws, bs = unpack(net.params, net.dims)
    act, rho = net.activation.code, net.activation.rho
    L = len(Ws)
    zs, zdots, acts, adots = [], [], [x], [u]
    a, adot = x, u
    for l in range(L):
        z = Ws[l] @ a + bs[l]
        zdot = Ws[l] @ adot
        zs.append(z)
        zdots.append(zdot)
        if l < L - 1:
            d1 = activate_grad(z, act, rho)
            a, adot = activate(z, act, rho), d1 * zdot
            acts.append(a)
            adots.append(adot)
    zL, zLdot = zs[-1], zdots[-1]
    C = zL.size
    if net.head == "softmax":
        p = softmax(zL[None, :])[0]
        e = np.zeros(C)
        e[c] = 1.0
        v = e - p
        zdot_bar = p[c] * v
        zbar = p[c] * (v * (v @ zLdot) - p * zLdot + p * (p @ zLdot))
    else:
        zdot_bar = np.zeros(C)
        zdot_bar[c] = 1.0
        zbar = np.zeros(C)
    grad = np.zeros_like(net.params)
    gWs, gbs = unpack(grad, net.dims)
    for l in range(L - 1, -1, -1):
        gWs[l][...] = np.outer(zbar, acts[l]) + np.outer(zdot_bar, adots[l])
        gbs[l][...] = zbar
        if l > 0:
            abar = Ws[l].T @ zbar
            adot_bar = Ws[l].T @ zdot_bar
            zprev, zprev_dot = zs[l - 1], zdots[l - 1]
            s = sigmoid(rho * zprev)
            d1 = s
            d2 = rho * s * (1.0 - s)
            zdot_bar = d1 * adot_bar
            zbar = d1 * abar + d2 * zprev_dot * adot_bar
    return grad


def param_gradient_of_gap(net, x, i, j, c, mode="finite_difference", step=None):
    """Gradient over parameters of the gap ``h(x, i, j) = I(x)_i - I(x)_j``."""
    x = _check_x(net, x)
    c = _check_class(net, c)
    if i == j:
        raise UsageError("gap needs two distinct features")
    u = np.zeros_like(x)
    u[i] = 1.0
    u[j] = -1.0
    if mode == "finite_difference":
        g = param_grad_directional(net, x[None, :], u[None, :], [c], [1.0], step)
    elif mode == "double_backprop":
        if net.activation.kind != "softplus" and len(net.dims) > 2:
            raise CapabilityError("double backprop needs a smooth (softplus) network")
        g = _double_backprop(net, x, u, c)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    return ParamGradient(g, net.dims)
