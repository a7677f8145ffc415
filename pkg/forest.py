"""Random forest over window features, with out-of-bag class probabilities.

Trees are grown by scikit-learn's RandomForestClassifier (Gini, midpoint thresholds,
per-tree seeds drawn from ``seed``). After fitting, every tree is flattened into node
arrays. Prediction, OOB estimates and persistence all work from those arrays, so a
saved model predicts exactly like the in-memory one.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field
from sklearn.ensemble import RandomForestClassifier

from artifacts import read_npz, write_npz
from errors import CompatibilityError, DegenerateTrainingError, InputError, ShapeError
from labels import MISSING, N_CLASSES, argmax_labels

logger = logging.getLogger(__name__)

MODEL_FORMAT = "activity-forest"
MODEL_FORMAT_VERSION = 1
LEAF = -1


class ForestConfig(BaseModel):
    n_trees: int = Field(1000, ge=1, description="Number of trees.")
    max_features: int = Field(7, ge=1, description="Features sampled at each split.")
    max_depth: Optional[int] = Field(None, ge=1, description="Depth limit; None grows until purity.")
    min_samples_leaf: int = Field(1, ge=1)
    seed: int = Field(42, description="Seed for bootstraps and feature sampling.")
    class_balancing: Literal["none"] = Field("none", description="Minority balancing is not used.")
    bootstrap: bool = Field(True, description="Draw a bootstrap sample per tree.")


@dataclass(frozen=True)
class ForestModel:
    """Flattened forest.

    Node arrays are concatenated over trees; ``tree_offsets[t]`` is the index of tree t's
    root. Child indices are global; leaves have ``left == right == -1``. ``leaf_counts``
    holds per-node class counts over the four labels.
    """
    config: ForestConfig
    feature_names: list[str]
    feature_manifest_version: str
    tree_offsets: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_counts: np.ndarray
    oob: np.ndarray = field(default_factory=lambda: np.zeros((0, N_CLASSES)))
    oob_valid: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_trees(self) -> int:
        return len(self.tree_offsets) - 1

    @property
    def leaf_proba(self) -> np.ndarray:
        totals = self.leaf_counts.sum(axis=1, keepdims=True)
        return self.leaf_counts / np.where(totals == 0, 1.0, totals)

    def split_counts(self) -> np.ndarray:
        """Number of splits on each feature across the forest."""
        used = self.feature[self.left != LEAF]
        return np.bincount(used, minlength=len(self.feature_names))


def _validate_training(features: np.ndarray, labels: np.ndarray, config: ForestConfig) -> None:
    if features.ndim != 2 or len(features) != len(labels):
        raise ShapeError(f"forest: features {features.shape} do not match {len(labels)} labels")
    if len(features) < 2:
        raise InputError("forest: at least 2 training samples are required")
    if not np.all(np.isfinite(features)):
        row = int(np.flatnonzero(~np.all(np.isfinite(features), axis=1))[0])
        raise InputError(f"forest: non-finite feature value in training row {row}")
    if np.any((labels < 0) | (labels >= N_CLASSES)):
        raise InputError("forest: training labels must be intensity labels (no missing values)")
    if len(np.unique(labels)) < 2:
        raise DegenerateTrainingError("forest: training labels contain a single class")
    if config.max_features > features.shape[1]:
        raise InputError(f"forest: max_features={config.max_features} exceeds {features.shape[1]} features")


def _flatten(clf: RandomForestClassifier) -> dict[str, np.ndarray]:
    """Concatenates sklearn trees into global node arrays with counts over all 4 labels."""
    columns = clf.classes_.astype(int)
    offsets, features, thresholds, lefts, rights, counts = [0], [], [], [], [], []
    for estimator in clf.estimators_:
        tree = estimator.tree_
        base = offsets[-1]
        value = tree.value[:, 0, :]
        # value holds fractions in newer scikit-learn and weighted counts in older ones
        fractions = value / value.sum(axis=1, keepdims=True)
        node_counts = np.zeros((tree.node_count, N_CLASSES))
        node_counts[:, columns] = fractions * tree.weighted_n_node_samples[:, None]
        is_leaf = tree.children_left == LEAF
        features.append(np.where(is_leaf, LEAF, tree.feature).astype(np.int64))
        thresholds.append(np.where(is_leaf, 0.0, tree.threshold))
        lefts.append(np.where(is_leaf, LEAF, tree.children_left + base).astype(np.int64))
        rights.append(np.where(is_leaf, LEAF, tree.children_right + base).astype(np.int64))
        counts.append(node_counts)
        offsets.append(base + tree.node_count)
    return {
        "tree_offsets": np.asarray(offsets, dtype=np.int64),
        "feature": np.concatenate(features),
        "threshold": np.concatenate(thresholds),
        "left": np.concatenate(lefts),
        "right": np.concatenate(rights),
        "leaf_counts": np.concatenate(counts),
    }


def _apply_tree(model: ForestModel, t: int, x32: np.ndarray) -> np.ndarray:
    """Leaf node index reached by every row of ``x32`` in tree ``t``."""
    nodes = np.full(len(x32), model.tree_offsets[t], dtype=np.int64)
    rows = np.arange(len(x32))
    active = model.left[nodes] != LEAF
    while active.any():
        idx = rows[active]
        current = nodes[idx]
        go_left = x32[idx, model.feature[current]] <= model.threshold[current]
        nodes[idx] = np.where(go_left, model.left[current], model.right[current])
        active[idx] = model.left[nodes[idx]] != LEAF
    return nodes


def _as_query(model: ForestModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != len(model.feature_names):
        raise ShapeError(
            f"forest: expected {len(model.feature_names)} feature columns, got shape {features.shape}"
        )
    # sklearn compares float32 feature values against float64 thresholds
    return features.astype(np.float32)


def train_forest(features: np.ndarray, labels: np.ndarray, config: ForestConfig = ForestConfig(),
                 feature_names: Optional[list[str]] = None, feature_manifest_version: str = "",
                 jobs: int = 1) -> ForestModel:
    """Grows the forest and computes out-of-bag probabilities for every training row."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    _validate_training(features, labels, config)
    names = list(feature_names) if feature_names is not None else [f"feature_{i}" for i in range(features.shape[1])]

    clf = RandomForestClassifier(
        n_estimators=config.n_trees,
        criterion="gini",
        max_features=config.max_features,
        max_depth=config.max_depth,
        min_samples_leaf=config.min_samples_leaf,
        bootstrap=config.bootstrap,
        class_weight=None,
        random_state=config.seed,
        n_jobs=jobs,
    )
    clf.fit(features, labels)
    model = ForestModel(config=config, feature_names=names, feature_manifest_version=feature_manifest_version,
                        **_flatten(clf))

    n = len(features)
    x32 = features.astype(np.float32)
    oob_sum = np.zeros((n, N_CLASSES))
    oob_trees = np.zeros(n, dtype=np.int64)
    leaf_proba = model.leaf_proba
    if config.bootstrap:
        for t, in_bag in enumerate(clf.estimators_samples_):
            out_of_bag = np.ones(n, dtype=bool)
            out_of_bag[in_bag] = False
            rows = np.flatnonzero(out_of_bag)
            if len(rows):
                oob_sum[rows] += leaf_proba[_apply_tree(model, t, x32[rows])]
                oob_trees[rows] += 1
    valid = oob_trees > 0
    oob = np.zeros((n, N_CLASSES))
    oob[valid] = oob_sum[valid] / oob_trees[valid, None]
    logger.info(f"forest: trained {config.n_trees} trees on {n} windows, {int(valid.sum())} with OOB estimates")
    return ForestModel(**{**model.__dict__, "oob": oob, "oob_valid": valid})


def predict_proba(model: ForestModel, features: np.ndarray) -> np.ndarray:
    """Mean over trees of the reached leaf's class distribution; rows sum to 1."""
    x32 = _as_query(model, features)
    total = np.zeros((len(x32), N_CLASSES))
    leaf_proba = model.leaf_proba
    for t in range(model.n_trees):
        total += leaf_proba[_apply_tree(model, t, x32)]
    return total / model.n_trees


def predict_labels(model: ForestModel, features: np.ndarray) -> np.ndarray:
    """Argmax of predict_proba, ties to the lower label index."""
    return argmax_labels(predict_proba(model, features))


def oob_accuracy(model: ForestModel, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    valid = model.oob_valid & (labels != MISSING)
    if not valid.any():
        return float("nan")
    return float(np.mean(argmax_labels(model.oob[valid]) == labels[valid]))


def save_forest(model: ForestModel, path) -> None:
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "config": model.config.model_dump(),
        "feature_names": model.feature_names,
        "feature_manifest_version": model.feature_manifest_version,
        "n_trees": model.n_trees,
    }
    arrays = {name: getattr(model, name) for name in
              ("tree_offsets", "feature", "threshold", "left", "right", "leaf_counts", "oob", "oob_valid")}
    write_npz(Path(path), header, arrays)


def load_forest(path) -> ForestModel:
    header, arrays = read_npz(Path(path))
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_FORMAT_VERSION:
        raise CompatibilityError(
            f"{path}: expected {MODEL_FORMAT} v{MODEL_FORMAT_VERSION}, found {header.get('format')} v{header.get('version')}"
        )
    return ForestModel(
        config=ForestConfig(**header["config"]),
        feature_names=list(header["feature_names"]),
        feature_manifest_version=header["feature_manifest_version"],
        **arrays,
    )
