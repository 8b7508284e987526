"""Dataset loading, preprocessing, splitting and synthetic generation."""

import logging
import re
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import numpy.typing as npt
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sklearn.preprocessing import MinMaxScaler

from .errors import DatasetError, LabelColumnError, StratificationError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

MIN_SPLIT_ROWS = 10
HOLDOUT_FRACTION_DENOMINATOR = 10  # validation and test each get floor(n / 10)

_RAGGED = re.compile(r"Expected (\d+) fields in line (\d+), saw (\d+)")


def _frozen_array(value: Any, dtype: type) -> Any:  # noqa: ANN401
    array = np.array(value, dtype=dtype)
    array.setflags(write=False)
    return array


class RawTable(BaseModel):
    """A parsed CSV before missing-value filling.

    Absent or unparsable feature cells are stored as NaN.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: FloatArray
    labels: IntArray
    feature_names: tuple[str, ...]
    label_name: str = "label"

    @field_validator("features", mode="before")
    @classmethod
    def _coerce_features(cls, value: Any) -> FloatArray:  # noqa: ANN401
        return _frozen_array(value, np.float64)

    @field_validator("labels", mode="before")
    @classmethod
    def _coerce_labels(cls, value: Any) -> IntArray:  # noqa: ANN401
        return _frozen_array(value, np.int64)

    @model_validator(mode="after")
    def _check_arity(self) -> "RawTable":
        if self.features.ndim != 2:  # noqa: PLR2004
            msg = "features must be a 2-D matrix"
            raise DatasetError(msg)
        if self.features.shape[0] != self.labels.shape[0]:
            msg = "every row needs exactly one label cell"
            raise DatasetError(msg)
        if self.features.shape[1] != len(self.feature_names):
            msg = "feature_names must match the feature column count"
            raise DatasetError(msg)
        return self

    @property
    def n(self) -> int:
        """Number of rows."""
        return int(self.features.shape[0])

    @property
    def column_names(self) -> tuple[str, ...]:
        """Feature names followed by the label column name."""
        return (*self.feature_names, self.label_name)

    @property
    def absent_count(self) -> int:
        """Number of absent feature cells."""
        return int(np.isnan(self.features).sum())

    @classmethod
    def from_dataset(cls, ds: "Dataset") -> "RawTable":
        """Wrap an already preprocessed dataset as a table (no absent cells)."""
        return cls(features=ds.X, labels=ds.y, feature_names=ds.feature_names)


class Dataset(BaseModel):
    """Feature matrix, binary labels (0 benign, 1 malicious) and feature names.

    Arrays are read-only; transforms build new datasets.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    X: FloatArray  # noqa: N815
    y: IntArray
    feature_names: tuple[str, ...]

    @field_validator("X", mode="before")
    @classmethod
    def _coerce_x(cls, value: Any) -> FloatArray:  # noqa: ANN401
        return _frozen_array(value, np.float64)

    @field_validator("y", mode="before")
    @classmethod
    def _coerce_y(cls, value: Any) -> IntArray:  # noqa: ANN401
        return _frozen_array(value, np.int64)

    @model_validator(mode="after")
    def _check_invariants(self) -> "Dataset":
        if self.X.ndim != 2 or self.y.ndim != 1:  # noqa: PLR2004
            msg = "X must be 2-D and y 1-D"
            raise DatasetError(msg)
        if self.X.shape[0] != self.y.shape[0]:
            msg = f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]} labels"
            raise DatasetError(msg)
        if self.X.shape[1] != len(self.feature_names):
            msg = "feature_names must match the feature column count"
            raise DatasetError(msg)
        if not np.isfinite(self.X).all():
            msg = "dataset contains missing or non-finite values"
            raise DatasetError(msg)
        if not np.isin(self.y, (0, 1)).all():
            msg = "labels must be 0 (benign) or 1 (malicious)"
            raise DatasetError(msg)
        return self

    @property
    def n(self) -> int:
        """Number of rows."""
        return int(self.X.shape[0])

    @property
    def d(self) -> int:
        """Number of features."""
        return int(self.X.shape[1])

    def label_counts(self) -> tuple[int, int]:
        """Return (benign count, malicious count)."""
        ones = int(self.y.sum())
        return self.n - ones, ones

    def subset(self, indices: npt.ArrayLike) -> "Dataset":
        """Return the rows at ``indices`` in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(X=self.X[idx], y=self.y[idx], feature_names=self.feature_names)

    def with_labels(self, y: npt.ArrayLike) -> "Dataset":
        """Return a copy carrying new labels."""
        return Dataset(X=self.X, y=y, feature_names=self.feature_names)

    def with_column(self, feature_index: int, values: npt.ArrayLike) -> "Dataset":
        """Return a copy whose column ``feature_index`` is replaced by ``values``."""
        X = self.X.copy()  # noqa: N806
        X[:, feature_index] = values
        return Dataset(X=X, y=self.y, feature_names=self.feature_names)

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of arrays and names."""
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        """Stack datasets row-wise; all parts must share feature names."""
        if not parts:
            msg = "cannot concatenate zero datasets"
            raise DatasetError(msg)
        names = parts[0].feature_names
        if any(part.feature_names != names for part in parts):
            msg = "datasets have different feature names"
            raise DatasetError(msg)
        return cls(
            X=np.concatenate([part.X for part in parts]),
            y=np.concatenate([part.y for part in parts]),
            feature_names=names,
        )


class PreprocessConfig(BaseModel):
    """Missing-value fill and normalization settings."""

    model_config = ConfigDict(frozen=True)

    fill_value: float = 0.0
    normalize: bool = True

    @field_validator("fill_value")
    @classmethod
    def _finite_fill(cls, value: float) -> float:
        if not np.isfinite(value):
            msg = "fill_value must be finite"
            raise ValueError(msg)
        return value


class SplitBundle(BaseModel):
    """Per-client training shards plus validation and test sets."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    client_shards: tuple[Dataset, ...] = Field(min_length=1)
    validation: Dataset
    test: Dataset

    @property
    def num_clients(self) -> int:
        """Number of client shards."""
        return len(self.client_shards)

    @property
    def train(self) -> Dataset:
        """All client shards stacked in client order."""
        return Dataset.concat(self.client_shards)

    @property
    def total_rows(self) -> int:
        """Rows across shards, validation and test."""
        return sum(s.n for s in self.client_shards) + self.validation.n + self.test.n


class SyntheticSpec(BaseModel):
    """Recipe for a balanced binary dataset with one informative feature."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(default=1000, ge=MIN_SPLIT_ROWS)
    d: int = Field(default=8, ge=1)
    informative_feature: int = Field(default=0, ge=0)
    class_separation: float = Field(default=6.0, ge=0.0)
    noise_sd: float = Field(default=1.0, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_feature(self) -> "SyntheticSpec":
        if self.informative_feature >= self.d:
            msg = f"informative_feature {self.informative_feature} out of range for d={self.d}"
            raise ValueError(msg)
        return self


def load_csv(path: Union[str, Path], label_column: int = -1) -> RawTable:
    """Load a CSV with a header row into a RawTable.

    Args:
        path: CSV file path
        label_column: Index of the label column; negative values count from the end

    Returns:
        RawTable with blank or unparsable numeric cells recorded as NaN

    Raises:
        FileNotFoundError: If the file does not exist
        DatasetError: On ragged rows, a bad label column index or a label not in {0, 1}
    """
    path = Path(path)
    if not path.is_file():
        msg = f"dataset file not found: {path}"
        raise FileNotFoundError(msg)

    # the header is read as row 0 so every row, the first data row included,
    # is held to the header's field count
    try:
        frame = pd.read_csv(
            path,
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=True,
        )
    except pd.errors.EmptyDataError as exc:
        msg = f"{path} has no header row"
        raise DatasetError(msg, line=1) from exc
    except pd.errors.ParserError as exc:
        match = _RAGGED.search(str(exc))
        if match is None:
            msg = f"ragged row in {path}: {exc}"
            raise DatasetError(msg) from exc
        expected, line, saw = (int(group) for group in match.groups())
        msg = f"ragged row: expected {expected} fields, saw {saw}"
        raise DatasetError(msg, line=line) from exc

    # short rows come back padded with NaN since blanks are kept as ""
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        row = int(np.flatnonzero(short)[0])
        msg = f"expected {frame.shape[1]} fields"
        raise DatasetError(msg, line=row + 1)

    header = [str(name) for name in frame.iloc[0]]
    body = frame.iloc[1:].reset_index(drop=True)
    width = len(header)
    index = label_column + width if label_column < 0 else label_column
    if not 0 <= index < width:
        msg = f"label column {label_column} out of range for {width} columns"
        raise LabelColumnError(msg)

    label_text = body.iloc[:, index].str.strip()
    bad = ~label_text.isin(("0", "1")).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        msg = f"label {body.iloc[row, index]!r} is not 0 or 1"
        raise DatasetError(msg, line=row + 2)

    feature_columns = [c for c in range(width) if c != index]
    numeric = pd.DataFrame(
        {c: pd.to_numeric(body[c].str.strip(), errors="coerce") for c in feature_columns},
        index=body.index,
        columns=feature_columns,
    )
    features = numeric.to_numpy(dtype=np.float64, na_value=np.nan)
    features[~np.isfinite(features)] = np.nan

    table = RawTable(
        features=features,
        labels=label_text.astype(np.int64).to_numpy(),
        feature_names=tuple(header[c] for c in feature_columns),
        label_name=header[index],
    )
    logger.info(
        "Loaded %s: %d rows, %d features, %d absent cells",
        path,
        table.n,
        len(table.feature_names),
        table.absent_count,
    )
    return table


def _min_max(values: FloatArray) -> FloatArray:
    # constant columns come out as zeros; clip absorbs round-off past 1.0
    scaler = MinMaxScaler(clip=True)
    return np.asarray(scaler.fit_transform(values), dtype=np.float64)


def preprocess(
    table: Union[RawTable, Dataset],
    cfg: Optional[PreprocessConfig] = None,
) -> Dataset:
    """Fill absent cells and min-max normalize every feature column.

    A Dataset that is already preprocessed comes back unchanged up to round-off.

    Args:
        table: Parsed table, or a Dataset to re-run the pipeline on
        cfg: Fill and normalization settings (defaults: fill 0, normalize)

    Returns:
        Dataset with no missing values

    Raises:
        DatasetError: If the table has no rows
    """
    cfg = cfg or PreprocessConfig()
    if isinstance(table, Dataset):
        table = RawTable.from_dataset(table)
    if table.n == 0:
        msg = "cannot preprocess a table with zero rows"
        raise DatasetError(msg)

    X = np.where(np.isnan(table.features), cfg.fill_value, table.features)  # noqa: N806
    if cfg.normalize:
        X = _min_max(X)  # noqa: N806
    return Dataset(X=X, y=table.labels, feature_names=table.feature_names)


def _proportional_ones(size: int, ones: int, n: int) -> int:
    """Nearest-integer share of label-1 rows for a part of ``size`` rows."""
    share = (2 * size * ones + n) // (2 * n)
    zeros = n - ones
    return int(min(max(share, size - zeros), ones, size))


def split(ds: Dataset, seed: int, num_clients: int = 2) -> SplitBundle:
    """Stratified 80/10/10 split followed by client partitioning.

    Validation and test each receive floor(n / 10) rows; training keeps the
    remaining n - 2 * floor(n / 10) and is partitioned into ``num_clients``
    shards. Label-1 counts per part are the nearest integer to the
    proportional share.

    Args:
        ds: Preprocessed dataset
        seed: Split seed
        num_clients: Number of client shards

    Returns:
        SplitBundle

    Raises:
        StratificationError: If n < 10 or a label is missing
    """
    n = ds.n
    if n < MIN_SPLIT_ROWS:
        msg = f"need at least {MIN_SPLIT_ROWS} rows to split, got {n}"
        raise StratificationError(msg)
    zeros, ones = ds.label_counts()
    if zeros == 0 or ones == 0:
        msg = f"both labels must be present to stratify (benign={zeros}, malicious={ones})"
        raise StratificationError(msg)

    part = n // HOLDOUT_FRACTION_DENOMINATOR
    rng = np.random.default_rng(derive_seed(seed, "split"))
    pos = rng.permutation(np.flatnonzero(ds.y == 1))
    neg = rng.permutation(np.flatnonzero(ds.y == 0))

    pos_val = _proportional_ones(part, ones, n)
    pos_holdout = _proportional_ones(2 * part, ones, n)
    neg_val = part - pos_val
    neg_holdout = 2 * part - pos_holdout

    val_idx = np.concatenate([pos[:pos_val], neg[:neg_val]])
    test_idx = np.concatenate([pos[pos_val:pos_holdout], neg[neg_val:neg_holdout]])
    train_idx = np.concatenate([pos[pos_holdout:], neg[neg_holdout:]])

    train = ds.subset(rng.permutation(train_idx))
    bundle = SplitBundle(
        client_shards=partition_clients(train, num_clients, derive_seed(seed, "partition")),
        validation=ds.subset(rng.permutation(val_idx)),
        test=ds.subset(rng.permutation(test_idx)),
    )
    logger.info(
        "Split %d rows: train=%d (%s), validation=%d, test=%d",
        n,
        train.n,
        "/".join(str(s.n) for s in bundle.client_shards),
        bundle.validation.n,
        bundle.test.n,
    )
    return bundle


def partition_clients(train: Dataset, k: int, seed: int) -> tuple[Dataset, ...]:
    """Partition training rows into ``k`` disjoint shards differing in size by at most 1.

    With ``k == 1`` the training set is returned as is.

    Raises:
        ValueError: If k < 1
        DatasetError: If the training set is empty or smaller than k
    """
    if k < 1:
        msg = f"need at least one client, got {k}"
        raise ValueError(msg)
    if train.n == 0:
        msg = "cannot partition an empty training set"
        raise DatasetError(msg)
    if k > train.n:
        msg = f"cannot give {k} clients a row each from {train.n} rows"
        raise DatasetError(msg)
    if k == 1:
        return (train,)

    order = np.random.default_rng(seed).permutation(train.n)
    return tuple(train.subset(chunk) for chunk in np.array_split(order, k))


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate a balanced dataset where only one feature depends on the label.

    The informative feature is N(0, sd) for label 0 and N(sep * sd, sd) for
    label 1; every other feature is N(0, sd) noise. Columns are then min-max
    scaled into [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    ones = spec.n // 2
    y = rng.permutation(np.concatenate([np.zeros(spec.n - ones), np.ones(ones)])).astype(np.int64)

    raw = rng.normal(0.0, spec.noise_sd, size=(spec.n, spec.d))
    raw[:, spec.informative_feature] += spec.class_separation * spec.noise_sd * y

    names = tuple(f"f{j}" for j in range(spec.d))
    return Dataset(X=_min_max(raw), y=y, feature_names=names)


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    """Write a dataset to an ``.npz`` archive."""
    np.savez(Path(path), X=ds.X, y=ds.y, feature_names=np.array(ds.feature_names, dtype=str))


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a dataset written by :func:`save_dataset`."""
    path = Path(path)
    if not path.is_file():
        msg = f"dataset archive not found: {path}"
        raise FileNotFoundError(msg)
    with np.load(path, allow_pickle=False) as archive:
        return Dataset(
            X=archive["X"],
            y=archive["y"],
            feature_names=tuple(str(name) for name in archive["feature_names"]),
        )
