"""Robustness and faithfulness metrics for ranking explanations."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from rankshield.errors import ShapeError, UsageError
from rankshield.explain import SaliencyMap, sort_features

COMP_SUFF_FULL_MAX_DIM = 32
PERCENT_GRID = (0.01, 0.05, 0.10, 0.20, 0.50)


def _scores(s):
    return s.scores if isinstance(s, SaliencyMap) else np.asarray(s, dtype=float)


def precision_at_k(orig, pert, k, order_by="signed"):
    """Overlap of the two top-k feature sets, divided by ``k``."""
    a, b = _scores(orig), _scores(pert)
    if a.shape != b.shape:
        raise ShapeError(f"saliency maps differ in shape: {a.shape} vs {b.shape}")
    if not 1 <= k <= a.size:
        raise UsageError(f"k={k} outside [1, {a.size}]")
    ta = sort_features(a, order_by)[:k]
    tb = sort_features(b, order_by)[:k]
    return np.intersect1d(ta, tb).size / k


def auc(scores, labels):
    """Binary ROC-AUC as the Mann-Whitney U statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise UsageError("AUC needs both classes present")
    r = stats.rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def model_auc(model, X, y):
    """AUC of the class-1 probability of ``model`` on ``(X, y)``."""
    return auc(model.proba_batch(np.asarray(X, dtype=float))[:, 1], y)


def _removed(x, idx, baseline):
    z = x.copy()
    z[idx] = baseline[idx]
    return z


def _baseline(x, baseline):
    if baseline is None:
        return np.zeros_like(x)
    b = np.broadcast_to(np.asarray(baseline, dtype=float), x.shape)
    return np.array(b)


def dffot(model, x, saliency, order_by="signed", baseline=None):
    """Smallest fraction of top-ranked features whose removal flips the prediction.

    Returns ``(fraction, flipped)``; ``(1.0, False)`` when no prefix flips it.
    """
    x = np.asarray(x, dtype=float)
    s = _scores(saliency)
    if s.shape != x.shape:
        raise ShapeError("saliency does not match the input")
    base = _baseline(x, baseline)
    order = sort_features(s, order_by)
    n = x.size
    Z = np.tile(x, (n, 1))
    for k in range(1, n + 1):
        Z[k - 1:, order[k - 1]] = base[order[k - 1]]
    c = int(model.predict_batch(x[None, :])[0])
    pred = model.predict_batch(Z)
    hit = np.flatnonzero(pred != c)
    if hit.size == 0:
        return 1.0, False
    return (hit[0] + 1) / n, True


def default_k_set(n):
    if n <= COMP_SUFF_FULL_MAX_DIM:
        return list(range(1, n + 1))
    return sorted({max(1, int(np.ceil(p * n))) for p in PERCENT_GRID})


def _check_k_set(K, n):
    K = default_k_set(n) if K is None else [int(k) for k in K]
    if not K or any(not 1 <= k <= n for k in K):
        raise UsageError(f"removal sizes must lie in [1, {n}]")
    return K


def _prob_deltas(model, x, saliency, K, keep, order_by, baseline):
    x = np.asarray(x, dtype=float)
    s = _scores(saliency)
    if s.shape != x.shape:
        raise ShapeError("saliency does not match the input")
    K = _check_k_set(K, x.size)
    base = _baseline(x, baseline)
    order = sort_features(s, order_by)
    c = int(model.predict_batch(x[None, :])[0])
    rows = []
    for k in K:
        idx = order[k:] if keep else order[:k]
        rows.append(_removed(x, idx, base))
    P = model.proba_batch(np.vstack([x[None, :]] + rows))[:, c]
    return float(np.mean(np.abs(P[0] - P[1:])))


def comp(model, x, saliency, K=None, order_by="signed", baseline=None):
    """Mean |probability change| after removing the top-k features, k in ``K``."""
    return _prob_deltas(model, x, saliency, K, False, order_by, baseline)


def suff(model, x, saliency, K=None, order_by="signed", baseline=None):
    """Mean |probability change| when only the top-k features are kept."""
    return _prob_deltas(model, x, saliency, K, True, order_by, baseline)


def correlation(xs, ys, kind="spearman"):
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.shape != ys.shape:
        raise ShapeError("series differ in length")
    if xs.size < 3:
        raise UsageError("correlation needs at least three points")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise UsageError("correlation is undefined for a constant series")
    if kind == "spearman":
        return float(stats.spearmanr(xs, ys)[0])
    if kind == "pearson":
        return float(stats.pearsonr(xs, ys)[0])
    raise UsageError(f"unknown correlation kind {kind!r}")


@dataclass
class MetricReport:
    """Per-sample metric columns plus their means."""

    values: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name, per_sample):
        self.values[name] = np.asarray(per_sample, dtype=float)

    @property
    def aggregates(self):
        return {name: float(np.mean(v)) for name, v in self.values.items()}

    def to_dict(self):
        return {"aggregates": self.aggregates, "metadata": self.metadata,
                "per_sample": {k: v.tolist() for k, v in self.values.items()}}

    def to_csv(self):
        names = list(self.values)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id"] + names)
        n = len(next(iter(self.values.values()))) if names else 0
        for i in range(n):
            w.writerow([i] + [repr(float(self.values[k][i])) for k in names])
        return buf.getvalue()
