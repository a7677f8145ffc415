import numpy as np
import pytest
from sklearn.ensemble import RandomForestClassifier

from artifacts import read_npz, write_npz
from errors import CompatibilityError, DegenerateTrainingError, InputError, ShapeError
from forest import (
    ForestConfig,
    load_forest,
    oob_accuracy,
    predict_labels,
    predict_proba,
    save_forest,
    train_forest,
)


def blobs(n_per_class=40, n_features=10, seed=0, classes=(0, 1, 2, 3)):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3, size=(max(classes) + 1, n_features))
    features = np.vstack([centers[c] + rng.normal(size=(n_per_class, n_features)) for c in classes])
    labels = np.repeat(np.asarray(classes), n_per_class)
    return features, labels


def sklearn_twin(config, features, labels, **kwargs):
    return RandomForestClassifier(
        n_estimators=config.n_trees, max_features=config.max_features, max_depth=config.max_depth,
        min_samples_leaf=config.min_samples_leaf, bootstrap=config.bootstrap, random_state=config.seed, **kwargs,
    ).fit(features, labels)


class TestTrainForest:
    def test_matches_sklearn_probabilities(self):
        features, labels = blobs()
        config = ForestConfig(n_trees=25, max_features=3, seed=11)
        model = train_forest(features, labels, config)
        reference = sklearn_twin(config, features, labels)
        query = np.random.default_rng(3).normal(0, 3, size=(30, 10))
        np.testing.assert_allclose(predict_proba(model, query), reference.predict_proba(query), atol=1e-12)

    def test_oob_matches_sklearn(self):
        features, labels = blobs(n_per_class=30, seed=4)
        config = ForestConfig(n_trees=60, max_features=3, seed=5)
        model = train_forest(features, labels, config)
        reference = sklearn_twin(config, features, labels, oob_score=True)
        assert model.oob_valid.all()
        np.testing.assert_allclose(model.oob, reference.oob_decision_function_, atol=1e-12)
        assert oob_accuracy(model, labels) == pytest.approx(reference.oob_score_)

    def test_missing_class_gets_zero_column(self):
        features, labels = blobs(classes=(0, 2, 3))
        model = train_forest(features, labels, ForestConfig(n_trees=10, max_features=3))
        probs = predict_proba(model, features)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert np.all(probs[:, 1] == 0.0)

    def test_identical_features_give_class_frequencies(self):
        features = np.ones((10, 8))
        labels = np.array([0] * 7 + [3] * 3)
        model = train_forest(features, labels, ForestConfig(n_trees=5, max_features=2, bootstrap=False))
        np.testing.assert_allclose(predict_proba(model, features[:1]), [[0.7, 0.0, 0.0, 0.3]])
        assert predict_labels(model, features[:1])[0] == 0

    def test_deterministic(self):
        features, labels = blobs(seed=9)
        config = ForestConfig(n_trees=15, max_features=4)
        a, b = train_forest(features, labels, config), train_forest(features, labels, config, jobs=2)
        np.testing.assert_array_equal(a.threshold, b.threshold)
        np.testing.assert_array_equal(a.oob, b.oob)

    def test_split_counts(self):
        features, labels = blobs()
        model = train_forest(features, labels, ForestConfig(n_trees=10, max_features=3))
        counts = model.split_counts()
        assert counts.shape == (10,)
        assert counts.sum() == int((model.left != -1).sum())


class TestTrainingErrors:
    def test_single_class(self):
        with pytest.raises(DegenerateTrainingError):
            train_forest(np.random.default_rng(0).normal(size=(20, 8)), np.zeros(20, dtype=int),
                         ForestConfig(n_trees=5))

    def test_non_finite(self):
        features, labels = blobs()
        features[5, 2] = np.nan
        with pytest.raises(InputError, match="row 5"):
            train_forest(features, labels, ForestConfig(n_trees=5, max_features=3))

    def test_missing_labels_rejected(self):
        features, labels = blobs()
        labels[0] = -1
        with pytest.raises(InputError):
            train_forest(features, labels, ForestConfig(n_trees=5, max_features=3))

    def test_max_features_too_large(self):
        features, labels = blobs(n_features=5)
        with pytest.raises(InputError):
            train_forest(features, labels, ForestConfig(n_trees=5, max_features=7))

    def test_shape_mismatch(self):
        features, labels = blobs()
        with pytest.raises(ShapeError):
            train_forest(features, labels[:-1], ForestConfig(n_trees=5, max_features=3))


class TestPersistence:
    def test_saved_model_predicts_identically(self, tmp_path):
        features, labels = blobs()
        model = train_forest(features, labels, ForestConfig(n_trees=12, max_features=3),
                             feature_names=[f"f{i}" for i in range(10)], feature_manifest_version="1")
        save_forest(model, tmp_path / "forest.npz")
        loaded = load_forest(tmp_path / "forest.npz")
        assert loaded.feature_names == model.feature_names
        assert loaded.feature_manifest_version == "1"
        assert loaded.config == model.config
        np.testing.assert_array_equal(predict_proba(loaded, features), predict_proba(model, features))
        np.testing.assert_array_equal(loaded.oob, model.oob)

    def test_bytes_are_reproducible(self, tmp_path):
        features, labels = blobs()
        config = ForestConfig(n_trees=8, max_features=3)
        save_forest(train_forest(features, labels, config), tmp_path / "a.npz")
        save_forest(train_forest(features, labels, config), tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_wrong_version(self, tmp_path):
        features, labels = blobs()
        save_forest(train_forest(features, labels, ForestConfig(n_trees=3, max_features=3)), tmp_path / "m.npz")
        header, arrays = read_npz(tmp_path / "m.npz")
        write_npz(tmp_path / "m.npz", {**header, "version": 99}, arrays)
        with pytest.raises(CompatibilityError):
            load_forest(tmp_path / "m.npz")

    def test_wrong_column_count(self):
        features, labels = blobs()
        model = train_forest(features, labels, ForestConfig(n_trees=3, max_features=3))
        with pytest.raises(ShapeError):
            predict_proba(model, features[:, :9])
