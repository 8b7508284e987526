"""Unit tests for the random forest and permutation importance."""

import itertools
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from py_fedpoison.data import Dataset, SyntheticSpec, gen_synthetic, split
from py_fedpoison.errors import DatasetError, MissingClassError, ShapeMismatchError
from py_fedpoison.importance import (
    Forest,
    ForestConfig,
    ImportanceReport,
    LeafNode,
    SplitNode,
    TreeNode,
    _best_split,
    export_importance_csv,
    fit_forest,
    gini,
    permutation_importance,
    predict_forest,
    predict_tree,
    select_target_feature,
    top_feature,
)

from .helpers import toy_dataset

SMALL_FOREST = ForestConfig(n_trees=8, max_depth=5, min_samples_split=4, seed=2)


def xor_grid() -> Dataset:
    """200 grid points labelled by the XOR of x0 > 0.5 and x1 > 0.5.

    Every grid column and grid row holds as many 0 labels as 1 labels, so any
    single axis-aligned cut leaves both sides balanced.
    """
    x0 = (np.arange(10) + 0.5) / 10
    x1 = (np.arange(20) + 0.5) / 20
    a, b = np.meshgrid(x0, x1, indexing="ij")
    X = np.column_stack([a.ravel(), b.ravel()])  # noqa: N806
    y = ((X[:, 0] > 0.5) ^ (X[:, 1] > 0.5)).astype(np.int64)
    return toy_dataset(X, y)


def leaves(node: TreeNode) -> list[LeafNode]:
    if isinstance(node, LeafNode):
        return [node]
    return leaves(node.left) + leaves(node.right)


def stump(low_label: int) -> SplitNode:
    """Split on x0 at 0.5 with ``low_label`` on the left and the other label on the right."""
    counts = {0: (3, 1), 1: (1, 3)}
    return SplitNode(
        feature=0,
        threshold=0.5,
        left=LeafNode(class_counts=counts[low_label]),
        right=LeafNode(class_counts=counts[1 - low_label]),
    )


def accuracy(predicted: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predicted == y))


def report_with(scores: tuple[float, ...]) -> ImportanceReport:
    return ImportanceReport(
        scores=scores,
        stds=(0.0,) * len(scores),
        repeats=1,
        baseline_accuracy=1.0,
        feature_names=tuple(f"f{j}" for j in range(len(scores))),
    )


class TestGini:
    """Test gini impurity."""

    @pytest.mark.parametrize(
        ("counts", "expected"),
        [((5, 5), 0.5), ((4, 0), 0.0), ((0, 3), 0.0), ((1, 3), 0.375)],
    )
    def test_values(self, counts: tuple[int, int], expected: float) -> None:
        """1 - sum(p^2) for a count pair."""
        assert gini(counts) == pytest.approx(expected)

    def test_empty_counts(self) -> None:
        """An empty node has no impurity."""
        with pytest.raises(ValueError, match="positive total"):
            gini((0, 0))


class TestBestSplit:
    """Test split selection."""

    def test_picks_separating_feature(self) -> None:
        """The column that separates the labels wins, at the midpoint."""
        X = np.array([[1.0, 0.1], [0.0, 0.2], [1.0, 0.8], [0.0, 0.9]])  # noqa: N806
        y = np.array([0, 0, 1, 1])
        assert _best_split(X, y, np.array([0, 1])) == (1, 0.5)

    def test_tie_goes_to_lower_feature(self) -> None:
        """Two equally good columns resolve to the lower index."""
        X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])  # noqa: N806
        y = np.array([0, 0, 1, 1])
        assert _best_split(X, y, np.array([0, 1])) == (0, 0.5)

    def test_constant_columns_cannot_split(self) -> None:
        """No valid threshold exists on constant columns."""
        X = np.ones((4, 2))  # noqa: N806
        assert _best_split(X, np.array([0, 1, 0, 1]), np.array([0, 1])) is None


class TestFitForest:
    """Test forest fitting and prediction."""

    def test_learns_planted_feature(self) -> None:
        """A forest fits the informative column of synthetic data."""
        ds = gen_synthetic(SyntheticSpec(n=400, d=3, informative_feature=1, seed=4))
        forest = fit_forest(ds, SMALL_FOREST)
        assert np.mean(predict_forest(forest, ds.X) == ds.y) > 0.9

    def test_deterministic_and_worker_independent(self, synthetic: Dataset) -> None:
        """Same seed gives the same trees, threaded or not."""
        serial = fit_forest(synthetic, SMALL_FOREST)
        assert fit_forest(synthetic, SMALL_FOREST) == serial
        assert fit_forest(synthetic, SMALL_FOREST, workers=3) == serial

    def test_depth_one_stump(self) -> None:
        """max_depth 1 gives one split with two leaves."""
        ds = toy_dataset([[0.0], [1.0], [2.0], [3.0], [4.0]], [1, 1, 1, 0, 0])
        cfg = ForestConfig(n_trees=1, min_samples_split=5, max_depth=1, bootstrap=False)
        forest = fit_forest(ds, cfg)
        tree = forest.trees[0]
        assert isinstance(tree, SplitNode)
        assert predict_tree(tree, ds.X).tolist() == [1, 1, 1, 0, 0]

    def test_single_label(self) -> None:
        """A forest needs both labels."""
        ds = toy_dataset(np.zeros((20, 2)), np.zeros(20, dtype=np.int64))
        with pytest.raises(MissingClassError, match="both labels"):
            fit_forest(ds, SMALL_FOREST)

    def test_too_few_rows(self) -> None:
        """Fewer rows than min_samples_split is rejected."""
        ds = toy_dataset([[0.0], [1.0]], [0, 1])
        with pytest.raises(DatasetError, match="at least 4 rows"):
            fit_forest(ds, SMALL_FOREST)

    def test_predict_shape_mismatch(self, synthetic: Dataset) -> None:
        """Prediction needs the fitted column count."""
        forest = fit_forest(synthetic, SMALL_FOREST)
        with pytest.raises(ShapeMismatchError):
            predict_forest(forest, np.zeros((3, synthetic.d + 1)))

    def test_empty_leaf_rejected(self) -> None:
        """A leaf must hold at least one training row."""
        with pytest.raises(ValueError, match="not both zero"):
            LeafNode(class_counts=(0, 0))

    def test_xor_needs_depth(self) -> None:
        """Deep trees vote XOR correctly while no single-split tree beats chance."""
        ds = xor_grid()
        deep = fit_forest(ds, ForestConfig(n_trees=25, min_samples_split=2, seed=3))
        assert accuracy(predict_forest(deep, ds.X), ds.y) >= 0.95

        shallow = fit_forest(ds, ForestConfig(n_trees=25, max_depth=1, min_samples_split=2))
        for tree in shallow.trees:
            assert accuracy(predict_tree(tree, ds.X), ds.y) <= 0.55

    def test_leaf_counts_cover_every_row(self, synthetic: Dataset) -> None:
        """Without bootstrap each tree's leaves hold exactly the training rows."""
        cfg = ForestConfig(n_trees=3, max_depth=5, min_samples_split=4, bootstrap=False)
        forest = fit_forest(synthetic, cfg)
        for tree in forest.trees:
            counts = np.array([leaf.class_counts for leaf in leaves(tree)]).sum(axis=0)
            assert tuple(counts.tolist()) == synthetic.label_counts()

    def test_forest_not_worse_than_best_tree(self) -> None:
        """On held-out rows the vote stays within 0.05 of the best member."""
        spec = SyntheticSpec(n=3000, d=5, informative_feature=2, class_separation=3.0, seed=6)
        bundle = split(gen_synthetic(spec), seed=6)
        forest = fit_forest(bundle.train, ForestConfig(n_trees=15, seed=6))
        test = bundle.test
        best_tree = max(accuracy(predict_tree(tree, test.X), test.y) for tree in forest.trees)
        assert accuracy(predict_forest(forest, test.X), test.y) >= best_tree - 0.05

    def test_tied_vote_goes_to_benign(self) -> None:
        """Two trees that disagree on every row predict 0 everywhere."""
        forest = Forest(trees=(stump(0), stump(1)), config=ForestConfig(n_trees=2), n_features=1)
        X = np.linspace(0.0, 1.0, 11).reshape(-1, 1)  # noqa: N806
        assert (predict_tree(forest.trees[0], X) != predict_tree(forest.trees[1], X)).all()
        assert predict_forest(forest, X).tolist() == [0] * 11


class TestPermutationImportance:
    """Test permutation importance."""

    def test_ignored_feature_scores_zero(self, synthetic: Dataset) -> None:
        """Shuffling a column the classifier never reads costs nothing."""
        before = synthetic.X.copy()
        report = permutation_importance(
            lambda X: (X[:, 0] > 0.5).astype(np.int64),
            synthetic,
            repeats=3,
            seed=1,
        )
        assert report.scores[1:] == (0.0,) * (synthetic.d - 1)
        assert report.stds[1:] == (0.0,) * (synthetic.d - 1)
        assert report.scores[0] > 0.2
        np.testing.assert_array_equal(synthetic.X, before)

    def test_seeded(self, synthetic: Dataset) -> None:
        """The same seed gives the same report."""
        forest = fit_forest(synthetic, SMALL_FOREST)

        def predict(X: np.ndarray) -> np.ndarray:  # noqa: N803
            return predict_forest(forest, X)

        assert permutation_importance(predict, synthetic, 2, 5) == permutation_importance(
            predict, synthetic, 2, 5
        )

    def test_bad_repeats(self, synthetic: Dataset) -> None:
        """At least one repeat is needed."""
        with pytest.raises(ValueError, match="repeats"):
            permutation_importance(lambda X: np.zeros(len(X)), synthetic, repeats=0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_planted_feature_ranks_first(self, seed: int) -> None:
        """The informative synthetic column is chosen as the target."""
        ds = gen_synthetic(SyntheticSpec(n=600, d=5, informative_feature=3, seed=seed))
        bundle = split(ds, seed=seed)
        cfg = ForestConfig(n_trees=10, max_depth=6, seed=seed)
        chosen, report = select_target_feature(bundle.train, bundle.validation, cfg, 3, seed)
        assert chosen == 3
        assert report.feature_names[chosen] == "f3"

    def test_matches_exhaustive_shuffle(self) -> None:
        """On 8 rows the score converges to the drop averaged over all 8! orderings."""
        X = np.column_stack([np.linspace(0.0, 1.0, 8), np.zeros(8)])  # noqa: N806
        y = np.array([0, 0, 1, 0, 1, 1, 0, 1])
        ds = toy_dataset(X, y)

        def predict(X: np.ndarray) -> np.ndarray:  # noqa: N803
            return (X[:, 0] > 0.5).astype(np.int64)

        orderings = np.array(list(itertools.permutations(range(8))))
        shuffled = (X[orderings, 0] > 0.5).astype(np.int64)
        baseline = accuracy(predict(X), y)
        expected = baseline - float((shuffled == y).mean())

        report = permutation_importance(predict, ds, repeats=2000, seed=4)
        assert report.baseline_accuracy == pytest.approx(baseline)
        assert report.scores[0] == pytest.approx(expected, abs=0.02)
        assert report.scores[1] == 0.0

    @pytest.mark.slow
    def test_planted_feature_wins_across_seeds(self) -> None:
        """The informative column ranks first for at least 19 of 20 seeds."""
        hits = 0
        for seed in range(20):
            planted = seed % 5
            spec = SyntheticSpec(n=600, d=5, informative_feature=planted, seed=seed)
            bundle = split(gen_synthetic(spec), seed=seed)
            cfg = ForestConfig(n_trees=10, max_depth=6, seed=seed)
            chosen, _ = select_target_feature(bundle.train, bundle.validation, cfg, 3, seed)
            hits += chosen == planted
        assert hits >= 19

    def test_single_feature(self) -> None:
        """With one column the top feature is 0."""
        ds = toy_dataset(np.linspace(0.0, 1.0, 20).reshape(-1, 1), [0] * 10 + [1] * 10)
        chosen, _ = select_target_feature(ds, ds, SMALL_FOREST, repeats=2)
        assert chosen == 0


class TestReportHelpers:
    """Test ranking and export of an importance report."""

    def test_top_feature_tie_goes_low(self) -> None:
        """Equal scores resolve to the lower index."""
        assert top_feature(report_with((0.1, 0.3, 0.3))) == 1

    def test_mismatched_lengths(self) -> None:
        """Scores and names must line up."""
        with pytest.raises(ValueError, match="one entry per feature"):
            ImportanceReport(
                scores=(0.1,),
                stds=(0.0, 0.0),
                repeats=1,
                baseline_accuracy=1.0,
                feature_names=("a",),
            )

    def test_export_csv(self, tmp_path: Path) -> None:
        """One row per feature with name, score and std."""
        path = tmp_path / "importance.csv"
        export_importance_csv(report_with((0.25, 0.0)), path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["feature_name", "score", "std"]
        assert frame["feature_name"].tolist() == ["f0", "f1"]
        assert frame["score"].tolist() == [0.25, 0.0]
