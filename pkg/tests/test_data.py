import json
import logging

import numpy as np
import pytest

from rankshield import data as D
from rankshield.errors import IngestionError, UsageError


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_csv_basic(tmp_path):
    p = write(tmp_path, "a,b,label\n1,2,yes\n3,4,no\n5,6,yes\n")
    ds = D.load_csv(p)
    assert len(ds) == 3 and ds.n_features == 2
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    assert ds.label_mapping == ("yes", "no")
    assert ds.feature_names == ("a", "b")


def test_load_csv_label_by_name_and_no_header(tmp_path):
    p = write(tmp_path, "y,a\n1,0.5\n0,1.5\n")
    ds = D.load_csv(p, label_column="y")
    np.testing.assert_array_equal(ds.features[:, 0], [0.5, 1.5])
    p = write(tmp_path, "0.5,1\n1.5,0\n", "n.csv")
    ds = D.load_csv(p, has_header=False)
    assert ds.feature_names == ("x0",)


def test_load_csv_errors(tmp_path):
    p = write(tmp_path, "a,b,label\n1,2,0\n3,abc,1\n")
    with pytest.raises(IngestionError) as e:
        D.load_csv(p)
    assert (e.value.row, e.value.col) == (3, 2)
    with pytest.raises(IngestionError, match="no data rows"):
        D.load_csv(write(tmp_path, "a,b,label\n", "h.csv"))
    with pytest.raises(IngestionError) as e:
        D.load_csv(write(tmp_path, "a,b,label\n1,2,0\n1,2\n", "r.csv"))
    assert e.value.row == 3
    with pytest.raises(IngestionError):
        D.load_csv(tmp_path / "missing.csv")
    with pytest.raises(IngestionError):
        D.load_csv(write(tmp_path, "a,label\nnan,0\n", "nan.csv"))
    with pytest.raises(IngestionError):
        D.load_csv(write(tmp_path, "a,label\n1,0\n", "c.csv"), label_column="z")


def test_csv_round_trip(tmp_path):
    ds = D.synth_gaussians(D.SynthSpec(n_features=3, n_samples=20, seed=1))
    p = tmp_path / "o.csv"
    D.write_csv(ds, p)
    back = D.load_csv(p)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_integer_labels_keep_class_index(tmp_path):
    ds = D.load_csv(write(tmp_path, "a,label\n1,1\n2,0\n3,1\n"))
    np.testing.assert_array_equal(ds.labels, [1, 0, 1])
    only = D.load_csv(write(tmp_path, "a,label\n1,1\n2,1\n", "one.csv"))
    np.testing.assert_array_equal(only.labels, [1, 1])


def test_normalize_examples(caplog):
    z = np.array([[-1.0], [1.0]])
    ds = D.Dataset(z, [0, 1])
    np.testing.assert_allclose(D.normalize(ds).features, z, atol=1e-12)
    mm = D.normalize(D.Dataset(np.array([[0.0], [10.0]]), [0, 1]), "minmax")
    np.testing.assert_array_equal(mm.features[:, 0], [0.0, 1.0])
    with caplog.at_level(logging.WARNING):
        const = D.normalize(D.Dataset(np.array([[3.0, 1.0], [3.0, 2.0]]), [0, 1]))
    np.testing.assert_array_equal(const.features[:, 0], [3.0, 3.0])
    assert "constant" in caplog.text
    with pytest.raises(UsageError):
        D.normalize(D.Dataset(np.array([[1.0]]), [0]))
    with pytest.raises(UsageError):
        D.normalize(const)


def test_normalize_round_trip():
    ds = D.synth_gaussians(D.SynthSpec(n_features=5, n_samples=50, seed=4))
    for kind in ("zscore", "minmax"):
        nd = D.normalize(ds, kind)
        assert np.max(np.abs(nd.raw_features() - ds.features)) <= 1e-9
    tr, te = D.split(ds, (0.5, 0.5), seed=0)
    ntr = D.normalize(tr)
    nte = D.normalize(te, params=ntr.normalization)
    assert nte.normalization is ntr.normalization


def test_split_properties():
    ds = D.synth_gaussians(D.SynthSpec(n_features=3, n_samples=101, seed=0))
    parts = D.split(ds, (0.7, 0.15, 0.15), seed=5)
    again = D.split(ds, (0.7, 0.15, 0.15), seed=5)
    for a, b in zip(parts, again):
        np.testing.assert_array_equal(a.features, b.features)
    rows = np.vstack([p.features for p in parts])
    assert rows.shape == ds.features.shape
    assert len({r.tobytes() for r in rows}) == len(ds)
    for c in (0, 1):
        total = int(np.sum(ds.labels == c))
        for frac, p in zip((0.7, 0.15, 0.15), parts):
            assert abs(np.sum(p.labels == c) - frac * total) <= 1


def test_split_degenerate_and_errors():
    ds = D.Dataset(np.arange(8.0)[:, None], [0, 1] * 4)
    a, b, c = D.split(ds, (1.0, 0.0, 0.0))
    assert len(a) == 8 and len(b) == 0 and len(c) == 0
    with pytest.raises(UsageError):
        D.split(ds, (0.5, 0.6))
    with pytest.raises(UsageError):
        D.split(D.Dataset(np.zeros((3, 1)), [0, 0, 1]), (0.5, 0.5, 0.0))
    with pytest.raises(UsageError):
        D.split(D.Dataset(np.zeros((3, 1)), [0, 0, 1]), (0.4, 0.3, 0.3))


def test_synth_gaussians():
    spec = D.SynthSpec(n_features=6, n_samples=41, seed=3)
    a, b = D.synth_gaussians(spec), D.synth_gaussians(spec)
    np.testing.assert_array_equal(a.features, b.features)
    assert abs(int(a.labels.sum()) - 41 / 2) <= 1
    with pytest.raises(UsageError):
        D.SynthSpec(n_features=1)
    with pytest.raises(UsageError):
        D.SynthSpec(class_separation=0.0)


def test_separable_synthetic_high_auc():
    from rankshield.metrics import model_auc
    from rankshield.training import TrainConfig, train
    ds = D.synth_gaussians(D.SynthSpec(n_features=4, n_samples=300, class_separation=10.0,
                                       noise_cov=0.1, seed=1))
    net, _ = train(TrainConfig(epochs=60, hidden=(8,)), ds)
    assert model_auc(net, ds.features, ds.labels) >= 0.99


def test_manifest(tmp_path):
    ds = D.normalize(D.synth_gaussians(D.SynthSpec(n_features=3, n_samples=10)))
    p = tmp_path / "m.json"
    D.write_manifest(p, ds, "synthetic", split_seed=2, extra={"k": 1})
    doc = json.loads(p.read_text())
    assert doc["split_seed"] == 2 and doc["normalization"]["kind"] == "zscore"
    assert doc["k"] == 1
