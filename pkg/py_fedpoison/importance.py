"""Random forest and permutation feature importance for picking the FP target column."""

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Union

import numpy as np
import numpy.typing as npt
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import Dataset
from .errors import DatasetError, MissingClassError, ShapeMismatchError
from .seeding import rng_for

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
LabelArray = npt.NDArray[np.int64]
Classifier = Callable[[FloatArray], npt.ArrayLike]


class LeafNode(BaseModel):
    """Terminal node holding (benign, malicious) training counts."""

    model_config = ConfigDict(frozen=True)

    class_counts: tuple[int, int]

    @model_validator(mode="after")
    def _non_empty(self) -> "LeafNode":
        if min(self.class_counts) < 0 or sum(self.class_counts) == 0:
            msg = "leaf class counts must be >= 0 and not both zero"
            raise ValueError(msg)
        return self

    @property
    def label(self) -> int:
        """Majority label; ties go to 0."""
        return int(self.class_counts[1] > self.class_counts[0])


class SplitNode(BaseModel):
    """Internal node: rows with ``x[feature] <= threshold`` go left."""

    model_config = ConfigDict(frozen=True)

    feature: int = Field(ge=0)
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[SplitNode, LeafNode]
SplitNode.model_rebuild()


class ForestConfig(BaseModel):
    """Random forest hyperparameters; ``features_per_split`` None means ceil(sqrt(d))."""

    model_config = ConfigDict(frozen=True)

    n_trees: int = Field(default=50, ge=1)
    max_depth: int = Field(default=10, ge=1)
    min_samples_split: int = Field(default=10, ge=1)
    features_per_split: Optional[int] = Field(default=None, ge=1)
    bootstrap: bool = True
    seed: int = 0

    def resolved_features(self, d: int) -> int:
        """Features examined per split for a d-feature dataset."""
        wanted = self.features_per_split or math.ceil(math.sqrt(d))
        return min(wanted, d)


class Forest(BaseModel):
    """A fitted forest."""

    model_config = ConfigDict(frozen=True)

    trees: tuple[TreeNode, ...] = Field(min_length=1)
    config: ForestConfig
    n_features: int = Field(ge=1)


class ImportanceReport(BaseModel):
    """Mean accuracy drop per feature when that feature is shuffled."""

    model_config = ConfigDict(frozen=True)

    scores: tuple[float, ...]
    stds: tuple[float, ...]
    repeats: int = Field(ge=1)
    baseline_accuracy: float
    feature_names: tuple[str, ...]

    @model_validator(mode="after")
    def _lengths(self) -> "ImportanceReport":
        if not len(self.scores) == len(self.stds) == len(self.feature_names):
            msg = "scores, stds and feature_names must have one entry per feature"
            raise ValueError(msg)
        return self


def gini(class_counts: tuple[int, int]) -> float:
    """Gini impurity 1 - sum(p_i^2) of a two-class count pair."""
    total = class_counts[0] + class_counts[1]
    if min(class_counts) < 0 or total == 0:
        msg = f"gini needs non-negative counts with a positive total, got {class_counts}"
        raise ValueError(msg)
    p0, p1 = class_counts[0] / total, class_counts[1] / total
    return 1.0 - (p0 * p0 + p1 * p1)


def _best_split(
    X: FloatArray,  # noqa: N803
    y: LabelArray,
    features: npt.NDArray[np.int64],
) -> Optional[tuple[int, float]]:
    """Lowest weighted child impurity over the candidate features.

    Features are scanned in ascending order and replaced only on strict
    improvement, and ``argmin`` returns the lowest threshold, so ties resolve
    to the lower feature index, then the lower threshold.
    """
    n = y.shape[0]
    total_ones = int(y.sum())
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    best: Optional[tuple[int, float]] = None
    best_impurity = np.inf

    for feature in features:
        order = np.argsort(X[:, feature], kind="stable")
        xs, ys = X[order, feature], y[order]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        ones_left = np.cumsum(ys)[:-1].astype(np.float64)
        ones_right = total_ones - ones_left
        p_left, p_right = ones_left / n_left, ones_right / n_right
        impurity_left = 2.0 * p_left * (1.0 - p_left)
        impurity_right = 2.0 * p_right * (1.0 - p_right)
        weighted = (n_left * impurity_left + n_right * impurity_right) / n
        weighted[~valid] = np.inf
        i = int(np.argmin(weighted))
        if weighted[i] < best_impurity:
            threshold = (xs[i] + xs[i + 1]) / 2.0
            if threshold >= xs[i + 1]:
                threshold = xs[i]
            best_impurity = float(weighted[i])
            best = (int(feature), float(threshold))
    return best


def _grow(
    X: FloatArray,  # noqa: N803
    y: LabelArray,
    cfg: ForestConfig,
    n_candidates: int,
    rng: np.random.Generator,
    depth: int,
) -> TreeNode:
    ones = int(y.sum())
    counts = (int(y.shape[0]) - ones, ones)
    if depth >= cfg.max_depth or y.shape[0] < cfg.min_samples_split or 0 in counts:
        return LeafNode(class_counts=counts)

    candidates = np.sort(rng.choice(X.shape[1], size=n_candidates, replace=False))
    split = _best_split(X, y, candidates)
    if split is None:
        return LeafNode(class_counts=counts)

    feature, threshold = split
    go_left = X[:, feature] <= threshold
    return SplitNode(
        feature=feature,
        threshold=threshold,
        left=_grow(X[go_left], y[go_left], cfg, n_candidates, rng, depth + 1),
        right=_grow(X[~go_left], y[~go_left], cfg, n_candidates, rng, depth + 1),
    )


def _fit_tree(ds: Dataset, cfg: ForestConfig, index: int) -> TreeNode:
    rng = rng_for(cfg.seed, "tree", index)
    rows = rng.integers(0, ds.n, size=ds.n) if cfg.bootstrap else np.arange(ds.n)
    return _grow(ds.X[rows], ds.y[rows], cfg, cfg.resolved_features(ds.d), rng, depth=0)


def fit_forest(ds: Dataset, cfg: Optional[ForestConfig] = None, workers: int = 1) -> Forest:
    """Fit a gini random forest; each tree draws from its own derived seed.

    Raises:
        MissingClassError: If the dataset holds a single label
        DatasetError: If there are fewer rows than ``min_samples_split``
    """
    cfg = cfg or ForestConfig()
    zeros, ones = ds.label_counts()
    if zeros == 0 or ones == 0:
        msg = "random forest needs both labels present"
        raise MissingClassError(msg)
    if ds.n < cfg.min_samples_split:
        msg = f"need at least {cfg.min_samples_split} rows, got {ds.n}"
        raise DatasetError(msg)

    indices = range(cfg.n_trees)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = tuple(pool.map(lambda i: _fit_tree(ds, cfg, i), indices))
    else:
        trees = tuple(_fit_tree(ds, cfg, i) for i in indices)
    logger.info("Fitted %d trees on %d rows x %d features", cfg.n_trees, ds.n, ds.d)
    return Forest(trees=trees, config=cfg, n_features=ds.d)


def _predict_node(
    node: TreeNode,
    X: FloatArray,  # noqa: N803
    rows: npt.NDArray[np.int64],
    out: LabelArray,
) -> None:
    if isinstance(node, LeafNode):
        out[rows] = node.label
        return
    go_left = X[rows, node.feature] <= node.threshold
    _predict_node(node.left, X, rows[go_left], out)
    _predict_node(node.right, X, rows[~go_left], out)


def predict_tree(node: TreeNode, X: npt.ArrayLike) -> LabelArray:  # noqa: N803
    """Labels predicted by a single tree."""
    features = np.asarray(X, dtype=np.float64)
    out = np.zeros(features.shape[0], dtype=np.int64)
    _predict_node(node, features, np.arange(features.shape[0]), out)
    return out


def predict_forest(forest: Forest, X: npt.ArrayLike) -> LabelArray:  # noqa: N803
    """Majority vote of the trees; a tied vote goes to label 0."""
    features = np.asarray(X, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != forest.n_features:  # noqa: PLR2004
        msg = f"expected {forest.n_features} columns, got shape {features.shape}"
        raise ShapeMismatchError(msg)
    votes = np.zeros(features.shape[0], dtype=np.int64)
    for tree in forest.trees:
        votes += predict_tree(tree, features)
    return (2 * votes > len(forest.trees)).astype(np.int64)


def _accuracy(predict: Classifier, X: FloatArray, y: LabelArray) -> float:  # noqa: N803
    return float(np.mean(np.asarray(predict(X)) == y))


def permutation_importance(
    predict: Classifier,
    ds: Dataset,
    repeats: int = 5,
    seed: int = 0,
) -> ImportanceReport:
    """Mean accuracy drop from shuffling each feature column in turn.

    Each feature has its own derived random stream, so the report does not
    depend on the order features are scored in. ``ds`` is never mutated.
    """
    if repeats < 1:
        msg = f"repeats must be >= 1, got {repeats}"
        raise ValueError(msg)
    if ds.n == 0:
        msg = "permutation importance needs a non-empty dataset"
        raise DatasetError(msg)

    baseline = _accuracy(predict, ds.X, ds.y)
    shuffled = ds.X.copy()
    scores, stds = [], []
    for j in range(ds.d):
        rng = rng_for(seed, "permute", j)
        drops = []
        for _ in range(repeats):
            shuffled[:, j] = rng.permutation(ds.X[:, j])
            drops.append(baseline - _accuracy(predict, shuffled, ds.y))
        shuffled[:, j] = ds.X[:, j]
        scores.append(float(np.mean(drops)))
        stds.append(float(np.std(drops)))

    return ImportanceReport(
        scores=tuple(scores),
        stds=tuple(stds),
        repeats=repeats,
        baseline_accuracy=baseline,
        feature_names=ds.feature_names,
    )


def top_feature(report: ImportanceReport) -> int:
    """Index of the highest score; ties go to the lowest index."""
    if not report.scores:
        msg = "importance report is empty"
        raise ValueError(msg)
    return int(np.argmax(report.scores))


def select_target_feature(
    train: Dataset,
    validation: Dataset,
    forest_cfg: Optional[ForestConfig] = None,
    repeats: int = 5,
    seed: int = 0,
) -> tuple[int, ImportanceReport]:
    """Fit a forest on ``train`` and rank features by permutation importance on ``validation``."""
    forest = fit_forest(train, forest_cfg)
    report = permutation_importance(lambda X: predict_forest(forest, X), validation, repeats, seed)
    chosen = top_feature(report)
    logger.info(
        "Top feature %d (%s): score %.4f, baseline accuracy %.4f",
        chosen,
        report.feature_names[chosen],
        report.scores[chosen],
        report.baseline_accuracy,
    )
    return chosen, report


def export_importance_csv(report: ImportanceReport, path: Union[str, Path]) -> None:
    """Write ``feature_name,score,std`` rows, one per feature."""
    frame = pd.DataFrame(
        {"feature_name": report.feature_names, "score": report.scores, "std": report.stds},
    )
    frame.to_csv(Path(path), index=False, float_format="%.6f")
