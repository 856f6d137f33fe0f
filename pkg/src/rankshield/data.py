"""Tabular datasets: CSV ingestion, normalization, stratified splits and a
synthetic two-class generator with curved class structure."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from rankshield.errors import IngestionError, ShapeError, UsageError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple = ()
    normalization: dict = field(default_factory=lambda: {"kind": "none"})
    label_mapping: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ShapeError(f"features {X.shape} and labels {y.shape} disagree")
        if not np.all(np.isfinite(X)):
            raise ShapeError("features contain NaN or Inf")
        if y.size and y.min() < 0:
            raise ShapeError("labels must be non-negative class indices")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ShapeError("feature_names length does not match the feature count")
        object.__setattr__(self, "feature_names", names)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def raw_features(self):
        """Features mapped back through the stored normalization."""
        return inverse_transform(self.normalization, self.features)


# ---------------------------------------------------------------------------
# CSV

def _label_index(header, label_column, width):
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise IngestionError(f"label column {label_column!r} not found")
        return header.index(label_column)
    idx = int(label_column)
    if idx < 0:
        idx += width
    if not 0 <= idx < width:
        raise IngestionError(f"label column index {label_column} out of range")
    return idx


def load_csv(path, label_column=-1, has_header=True):
    """Read a comma-separated file into a :class:`Dataset`.

    Labels are mapped to ``0..C-1`` in first-appearance order. Error
    locations are 1-based file line and column numbers.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise IngestionError(f"{path} is not UTF-8 text") from exc
    header = None
    first = 1
    if has_header:
        if not rows:
            raise IngestionError("empty file")
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
        first = 2
    lines = [(first + i, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not lines:
        raise IngestionError("no data rows")
    width = len(header) if header is not None else len(lines[0][1])
    lab = _label_index(header, label_column, width)
    X, raw_labels = [], []
    for line, r in lines:
        if len(r) != width:
            raise IngestionError(f"expected {width} fields, found {len(r)}", row=line,
                                 col=min(len(r), width) + 1)
        vals = []
        for c, cell in enumerate(r):
            if c == lab:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"non-numeric feature value {cell.strip()!r}",
                                     row=line, col=c + 1) from None
            if not math.isfinite(v):
                raise IngestionError("non-finite feature value", row=line, col=c + 1)
            vals.append(v)
        X.append(vals)
        raw_labels.append(r[lab].strip())
    if all(v.isdigit() for v in raw_labels):
        # integer labels are class indices already; keep them so that a file
        # holding a subset of classes still lines up with the model
        y = np.array([int(v) for v in raw_labels], dtype=np.int64)
        mapping = [str(i) for i in range(int(y.max()) + 1)]
    else:
        mapping = list(dict.fromkeys(raw_labels))
        y = np.array([mapping.index(v) for v in raw_labels], dtype=np.int64)
    names = (tuple(h for i, h in enumerate(header) if i != lab) if header
             else tuple(f"x{i}" for i in range(width - 1)))
    return Dataset(np.array(X, dtype=float).reshape(len(X), width - 1), y, names,
                   label_mapping=tuple(mapping))


def write_csv(dataset, path):
    """Write features plus a trailing ``label`` column, with a header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(dataset.feature_names) + ["label"])
        labels = dataset.label_mapping or None
        for x, yv in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [labels[yv] if labels else int(yv)])


# ---------------------------------------------------------------------------
# normalization

def fit_normalization(X, kind="zscore"):
    X = np.asarray(X, dtype=float)
    if kind == "none":
        return {"kind": "none"}
    if kind == "zscore":
        if X.shape[0] < 2:
            raise UsageError("z-score normalization needs at least two rows")
        shift = X.mean(axis=0)
        scale = X.std(axis=0, ddof=0)
    elif kind == "minmax":
        if X.shape[0] < 1:
            raise UsageError("min-max normalization needs data")
        shift = X.min(axis=0)
        scale = X.max(axis=0) - shift
    else:
        raise UsageError(f"unknown normalization {kind!r}")
    flat = scale == 0
    if np.any(flat):
        log.warning("constant feature(s) %s passed through unchanged",
                    np.flatnonzero(flat).tolist())
        shift = np.where(flat, 0.0, shift)
        scale = np.where(flat, 1.0, scale)
    return {"kind": kind, "shift": shift.tolist(), "scale": scale.tolist()}


def apply_normalization(params, X):
    X = np.asarray(X, dtype=float)
    if params["kind"] == "none":
        return X.copy()
    return (X - np.asarray(params["shift"])) / np.asarray(params["scale"])


def inverse_transform(params, Z):
    Z = np.asarray(Z, dtype=float)
    if params["kind"] == "none":
        return Z.copy()
    return Z * np.asarray(params["scale"]) + np.asarray(params["shift"])


def normalize(dataset, kind="zscore", params=None):
    """Normalize per feature; pass fitted ``params`` to reuse another split's."""
    if dataset.normalization.get("kind", "none") != "none":
        raise UsageError("dataset is already normalized")
    params = fit_normalization(dataset.features, kind) if params is None else params
    return replace(dataset, features=apply_normalization(params, dataset.features),
                   normalization=params)


# ---------------------------------------------------------------------------
# splits

def _allocate(count, fractions):
    """Largest-remainder allocation of ``count`` items to ``fractions``."""
    ideal = np.asarray(fractions) * count
    base = np.floor(ideal).astype(int)
    rem = count - base.sum()
    order = np.argsort(-(ideal - base), kind="stable")
    base[order[:rem]] += 1
    return base


def split(dataset, fractions=(0.7, 0.15, 0.15), seed=0):
    """Stratified shuffle split into ``len(fractions)`` disjoint datasets."""
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise UsageError("split fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fr]
    live = int(np.count_nonzero(fr))
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < live:
            raise UsageError(f"class {c} has {idx.size} samples for {live} splits")
        idx = rng.permutation(idx)
        counts = _allocate(idx.size, fr)
        for p, chunk in zip(parts, np.split(idx, np.cumsum(counts)[:-1])):
            p.extend(chunk.tolist())
    return tuple(dataset.subset(np.sort(np.array(p, dtype=np.int64))) for p in parts)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SynthSpec:
    n_features: int = 16
    n_samples: int = 2000
    class_separation: float = 2.0
    noise_cov: float = 1.0
    seed: int = 0
    interaction_fraction: float = 0.25
    interaction_scale: float = 0.5

    def __post_init__(self):
        if self.n_features < 2:
            raise UsageError("synthetic data needs n_features >= 2")
        if not self.class_separation > 0:
            raise UsageError("class_separation must be positive")
        if not self.noise_cov > 0:
            raise UsageError("noise_cov must be positive")
        if self.n_samples < 2:
            raise UsageError("n_samples must be >= 2")

    def to_dict(self):
        return dict(self.__dict__)


def synth_gaussians(spec):
    """Two Gaussian classes at ``+-separation/2`` along a random unit direction.

    A quarter of the features (by default) additionally receive a product
    of two other latent coordinates, so class boundaries in feature space are
    curved and input Hessians of a fitted model are nonzero.
    """
    rng = np.random.default_rng(spec.seed)
    n, N = spec.n_features, spec.n_samples
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    y = np.arange(N) % 2
    y = rng.permutation(y)
    Z = (np.where(y[:, None] == 1, 0.5, -0.5) * spec.class_separation * u
         + math.sqrt(spec.noise_cov) * rng.standard_normal((N, n)))
    X = Z.copy()
    m = max(1, int(round(spec.interaction_fraction * n)))
    targets = rng.choice(n, size=m, replace=False)
    for f in targets:
        a, b = rng.choice(np.setdiff1d(np.arange(n), [f]), size=2, replace=False)
        X[:, f] += spec.interaction_scale * Z[:, a] * Z[:, b]
    return Dataset(X, y.astype(np.int64), tuple(f"x{i}" for i in range(n)))


def write_manifest(path, dataset, source, split_seed=None, extra=None):
    doc = {"source": str(source), "n_samples": len(dataset),
           "n_features": dataset.n_features, "normalization": dataset.normalization,
           "label_mapping": list(dataset.label_mapping), "split_seed": split_seed}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
