import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glare.errors import DimensionError, GlareIOError, SchemaError
from glare.features import (Dataset, Featurizer, RawSample, class_separation, joint_features,
                            load_dataset, normalize_landmarks, pca_apply, pca_fit, read_samples,
                            save_dataset, synth_dataset)

finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_normalize_centroid_and_radius(n, seed):
    p = np.random.default_rng(seed).normal(size=(n, 3)) * 5 + 3
    q = normalize_landmarks(p)
    assert np.all(np.abs(q.mean(axis=0)) <= 1e-10)
    assert abs(np.sqrt(np.mean(np.sum(q ** 2, axis=1))) - 1.0) <= 1e-10


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1), st.floats(0.01, 100.0),
       st.tuples(finite, finite, finite))
def test_normalize_translation_scale_invariance(n, seed, scale, shift):
    p = np.random.default_rng(seed).normal(size=(n, 3))
    a = normalize_landmarks(p)
    b = normalize_landmarks(scale * p + np.array(shift))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_normalize_two_points():
    # [TRIVIAL] two points end up at +-1 along their axis
    q = normalize_landmarks([[0, 0, 0], [4, 0, 0]])
    np.testing.assert_allclose(q, [[-1, 0, 0], [1, 0, 0]])


def test_pca_matches_svd():
    # [DERIVED] oracle: right singular vectors of the centred data
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 10)) @ rng.normal(size=(10, 10))
    model = pca_fit(X, 4)
    Xc = X - X.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    for i in range(4):
        assert abs(abs(model.components[i] @ Vt[i]) - 1.0) < 1e-8
    np.testing.assert_allclose(model.explained_variance, s[:4] ** 2 / 199, rtol=1e-10)


def test_pca_apply_properties():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 6)) * np.arange(1, 7)
    model = pca_fit(X, 3)
    np.testing.assert_allclose(pca_apply(model, model.mean[None, :]), 0.0, atol=1e-12)
    e0 = pca_apply(model, (model.mean + model.components[0])[None, :])[0]
    np.testing.assert_allclose(e0, [1, 0, 0], atol=1e-12)
    Z = pca_apply(model, X)
    cov = np.cov(Z.T)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 1e-8 * np.max(np.abs(cov))
    row = X[5]
    np.testing.assert_allclose(pca_apply(model, row[None, :])[0],
                               [float(np.dot(row - model.mean, c)) for c in model.components], atol=1e-12)


def test_pca_sign_convention():
    X = np.random.default_rng(2).normal(size=(50, 5))
    for c in pca_fit(X, 5).components:
        assert c[np.argmax(np.abs(c))] > 0


def test_pca_rank_deficient_warns():
    X = np.zeros((20, 4))
    X[:, 0] = np.arange(20)
    with pytest.warns(RuntimeWarning):
        model = pca_fit(X, 3)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-12)


def test_pca_errors():
    with pytest.raises(DimensionError):
        pca_fit(np.zeros((10, 3)), 4)
    with pytest.raises(DimensionError):
        pca_apply(pca_fit(np.random.default_rng(0).normal(size=(10, 3)), 2), np.zeros((1, 4)))


def test_joint_features_concrete_rows():
    p = np.array([[1.0, 2, 3], [4, 5, 6]])
    a = np.array([[7.0, 8], [9, 10]])
    assert joint_features(p, a).tolist() == [[1, 2, 3, 7, 8], [4, 5, 6, 9, 10]]
    assert joint_features(p, a, "position").tolist() == [[1, 2, 3, 0, 0], [4, 5, 6, 0, 0]]
    assert joint_features(p, a, "appearance").tolist() == [[0, 0, 0, 7, 8], [0, 0, 0, 9, 10]]
    assert joint_features(p, np.zeros((2, 0))).tolist() == p.tolist()
    with pytest.raises(DimensionError):
        joint_features(p, a[:1])


def test_synth_is_deterministic():
    a = synth_dataset(3, 5, 12, 0.05, seed=4)
    b = synth_dataset(3, 5, 12, 0.05, seed=4)
    assert a.samples == b.samples and a.splits == b.splits
    assert synth_dataset(3, 5, 12, 0.05, seed=5).samples != a.samples


def test_synth_zero_noise_classes_are_constant():
    ds = synth_dataset(4, 6, 20, 0.0, seed=0)
    for c in range(4):
        members = [s for s in ds.samples if s.label == c]
        for s in members[1:]:
            np.testing.assert_array_equal(s.landmarks, members[0].landmarks)


def test_synth_splits_partition_80_10_10():
    ds = synth_dataset(7, 20, 20, 0.05, seed=0)
    idx = sorted(i for v in ds.splits.values() for i in v)
    assert idx == list(range(140))
    assert [len(ds.splits[k]) for k in ("train", "val", "test")] == [112, 14, 14]


def test_synth_class_separation_benchmark():
    # [DERIVED] min centroid distance > 3x mean intra-class deviation
    inter, intra = class_separation(synth_dataset(7, 200, 68, 0.05, seed=0))
    assert inter > 3 * intra


def test_synth_bad_arguments():
    with pytest.raises(ValueError):
        synth_dataset(1, 5, 20)
    with pytest.raises(ValueError):
        synth_dataset(3, 5, 9)


def test_featurizer_width_and_modes():
    ds = synth_dataset(3, 10, 20, 0.05, seed=0)
    fz = Featurizer.fit(ds.split("train"), 4, "position")
    coords, x = fz.transform(ds.samples[0])
    assert x.shape == (20, 7)
    assert np.all(x[:, 3:] == 0)
    np.testing.assert_array_equal(x[:, :3], coords)
    again = Featurizer.from_dict(json.loads(json.dumps(fz.to_dict())))
    np.testing.assert_array_equal(again.transform(ds.samples[0])[1], x)


def test_featurizer_without_appearance_zero_fills():
    s = RawSample("a", 0, np.random.default_rng(0).normal(size=(12, 3)))
    fz = Featurizer.fit([s], 5)
    _, x = fz.transform(s)
    assert x.shape == (12, 8) and np.all(x[:, 3:] == 0)


def test_dataset_round_trip(tmp_path):
    ds = synth_dataset(3, 8, 15, 0.05, seed=2)
    path = str(tmp_path / "d.jsonl")
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.samples == ds.samples
    assert back.splits == ds.splits
    assert back.class_names == ds.class_names


def test_dataset_header_sidecar(tmp_path):
    ds = synth_dataset(2, 3, 12, 0.05, seed=0)
    path = str(tmp_path / "d.jsonl")
    save_dataset(ds, path)
    lines = open(path).read().splitlines()
    open(path + ".header.json", "w").write(lines[0])
    open(path, "w").write("\n".join(lines[1:]) + "\n")
    assert load_dataset(path).samples == ds.samples


def _write(path, header, records):
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in records:
            fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")


HEADER = {"n_landmarks": 2, "n_classes": 2}
GOOD = {"id": "a", "label": 0, "landmarks": [[0, 0, 0], [1, 0, 0]]}


def test_load_rejects_bad_files(tmp_path):
    path = str(tmp_path / "d.jsonl")
    open(path, "w").close()
    with pytest.raises(SchemaError):
        load_dataset(path)
    _write(path, HEADER, [GOOD, '{"id": "b", "label": 0, "landmarks": [[0, 0, NaN], [1, 0, 0]]}'])
    with pytest.raises(SchemaError, match="line 3"):
        load_dataset(path)
    _write(path, HEADER, [GOOD, "{not json"])
    with pytest.raises(GlareIOError, match="line 3"):
        load_dataset(path)
    _write(path, HEADER, [dict(GOOD, label=2)])
    with pytest.raises(SchemaError, match="label"):
        load_dataset(path)
    _write(path, HEADER, [dict(GOOD, landmarks=[[0, 0, 0]])])
    with pytest.raises(SchemaError, match="landmarks"):
        load_dataset(path)
    with pytest.raises(GlareIOError):
        load_dataset(str(tmp_path / "missing.jsonl"))


def test_read_samples_without_labels(tmp_path):
    path = str(tmp_path / "d.jsonl")
    rec = {k: v for k, v in GOOD.items() if k != "label"}
    _write(path, HEADER, [rec])
    _, samples = read_samples(path, require_labels=False)
    assert samples[0].label == -1
    with pytest.raises(SchemaError):
        read_samples(path)


def test_dataset_splits_must_be_disjoint():
    s = RawSample("a", 0, np.zeros((2, 3)))
    with pytest.raises(SchemaError):
        Dataset([s, s], {"train": [0, 1], "val": [1]}, 1)
