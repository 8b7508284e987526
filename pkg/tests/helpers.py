"""Small builders shared by the test modules."""

import numpy as np
import numpy.typing as npt

from py_fedpoison.data import Dataset

SMALL_HIDDEN = (16, 8)


def toy_dataset(X: npt.ArrayLike, y: npt.ArrayLike) -> Dataset:  # noqa: N803
    """Wrap arrays as a dataset with feature names f0, f1, ..."""
    X = np.asarray(X, dtype=np.float64)  # noqa: N806
    return Dataset(X=X, y=y, feature_names=tuple(f"f{j}" for j in range(X.shape[1])))
