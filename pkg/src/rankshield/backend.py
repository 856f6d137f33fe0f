"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy fallback is used. Setting ``RANKSHIELD_PURE_PYTHON=1`` forces the
fallback (used by the benchmark and the backend-parity tests).

The compiled loops win on the per-sample calls made by attacks and thickness
estimation; numpy's BLAS wins on large batches, so batches above
``BATCH_CROSSOVER`` rows go to the fallback either way.
"""

import os

from rankshield import _fallback

NAME = "python"
BATCH_CROSSOVER = 32
score_grads = _fallback.score_grads
param_grads = _fallback.param_grads

if os.environ.get("RANKSHIELD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from rankshield import _kernels
    except ImportError:  # pragma: no cover - depends on the build
        _kernels = None
    if _kernels is not None:
        NAME = "compiled"

        def score_grads(params, dims, act, rho, head, X, classes):
            impl = _kernels if X.shape[0] <= BATCH_CROSSOVER else _fallback
            return impl.score_grads(params, dims, act, rho, head, X, classes)

        def param_grads(params, dims, act, rho, mode, X, classes, weights):
            impl = _kernels if X.shape[0] <= BATCH_CROSSOVER else _fallback
            return impl.param_grads(params, dims, act, rho, mode, X, classes, weights)
