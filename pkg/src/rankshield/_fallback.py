"""Pure numpy implementation of the dense-network kernels.

Both this module and the compiled ``_kernels`` extension expose the same two
functions; :mod:`rankshield.backend` picks one at import time.

Parameters travel as one flat float64 vector: for each layer, the weight
matrix ``[d_out, d_in]`` in row-major order followed by its bias ``[d_out]``.
``dims`` holds the layer widths ``(n, h_1, ..., C)``.

* ``act``: 0 = ReLU, 1 = Softplus with sharpness ``rho``.
* ``head`` / ``mode``: 0 = softmax probability of the class, 1 = raw logit of
  the class, 2 = cross-entropy against the class (``param_grads`` only).
"""

import numpy as np

RELU = 0
SOFTPLUS = 1

HEAD_PROB = 0
HEAD_LOGIT = 1
MODE_XENT = 2


def unpack(params, dims):
    """Split a flat parameter vector into per-layer ``(W, b)`` views."""
    Ws, bs = [], []
    off = 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        d_in, d_out = int(d_in), int(d_out)
        Ws.append(params[off:off + d_out * d_in].reshape(d_out, d_in))
        off += d_out * d_in
        bs.append(params[off:off + d_out])
        off += d_out
    return Ws, bs


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activate(z, act, rho):
    if act == RELU:
        return np.maximum(z, 0.0)
    rz = rho * z
    big = rz > 30.0
    return np.where(big, z, np.log1p(np.exp(np.where(big, 0.0, rz))) / rho)


def activate_grad(z, act, rho):
    if act == RELU:
        return (z > 0.0).astype(z.dtype)
    return sigmoid(rho * z)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(Ws, bs, act, rho, X):
    """Layer-by-layer pre-activations and activations for a batch."""
    pre = []
    acts = [X]
    a = X
    last = len(Ws) - 1
    for l, (W, b) in enumerate(zip(Ws, bs)):
        z = a @ W.T + b
        pre.append(z)
        a = z if l == last else activate(z, act, rho)
        acts.append(a)
    return pre, acts


def _output_delta(logits, probs, classes, mode):
    B, C = probs.shape
    rows = np.arange(B)
    onehot = np.zeros((B, C))
    onehot[rows, classes] = 1.0
    if mode == HEAD_PROB:
        pc = probs[rows, classes]
        return pc[:, None] * (onehot - probs), pc
    if mode == HEAD_LOGIT:
        return onehot, logits[rows, classes]
    logp = logits - logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    return probs - onehot, -logp[rows, classes]


def score_grads(params, dims, act, rho, head, X, classes):
    """Class scores and their input gradients for a batch.

    Returns ``(probs, scores, grads)`` with shapes ``(B, C)``, ``(B,)`` and
    ``(B, n)``.
    """
    Ws, bs = unpack(params, dims)
    pre, _ = forward(Ws, bs, act, rho, X)
    logits = pre[-1]
    probs = softmax(logits)
    delta, scores = _output_delta(logits, probs, classes, head)
    for l in range(len(Ws) - 1, 0, -1):
        delta = (delta @ Ws[l]) * activate_grad(pre[l - 1], act, rho)
    return probs, scores, delta @ Ws[0]


def param_grads(params, dims, act, rho, mode, X, classes, weights):
    """Gradient of ``sum_b weights[b] * s(x_b, classes[b])`` w.r.t. parameters.

    ``s`` is the class probability, the class logit or the cross-entropy
    depending on ``mode``. Returns ``(value, flat_gradient)``.
    """
    Ws, bs = unpack(params, dims)
    pre, acts = forward(Ws, bs, act, rho, X)
    logits = pre[-1]
    probs = softmax(logits)
    delta, per = _output_delta(logits, probs, classes, mode)
    value = float(weights @ per)
    delta = delta * weights[:, None]
    grad = np.empty_like(params)
    gWs, gbs = unpack(grad, dims)
    for l in range(len(Ws) - 1, -1, -1):
        gWs[l][...] = delta.T @ acts[l]
        gbs[l][...] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ Ws[l]) * activate_grad(pre[l - 1], act, rho)
    return value, grad
