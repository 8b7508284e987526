"""Label-flipping (LF) and feature-poisoning (FP) transforms on a client shard."""

import logging
import math
from enum import Enum
from fractions import Fraction
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import Dataset
from .errors import AttackError, DatasetError, DegenerateColumnError, MissingClassError
from .nn import Bau1Params, evaluate

logger = logging.getLogger(__name__)


class AttackKind(str, Enum):
    """Poisoning attack family."""

    LF = "LF"
    FP = "FP"

    @classmethod
    def _missing_(cls, value: object) -> Optional["AttackKind"]:
        if isinstance(value, str):
            for member in cls:
                if member.value == value.upper():
                    return member
        return None


class AttackSpec(BaseModel):
    """What to poison, how much, and on which client.

    ``feature_index`` is only read by FP; when it is None the experiment
    picks the most important feature.
    """

    model_config = ConfigDict(frozen=True)

    kind: AttackKind
    percent: float = Field(ge=0.0, le=100.0, allow_inf_nan=False)
    target_client: int = Field(default=0, ge=0)
    feature_index: Optional[int] = Field(default=None, ge=0)
    seed: int = 0
    step3_always: bool = True


class FpStats(BaseModel):
    """Column range, class means and the benign replacement pool used by FP."""

    model_config = ConfigDict(frozen=True)

    min_value: float
    max_value: float
    average_zero: float
    average_one: float
    normalized_avg_zero: float
    normalized_avg_one: float
    unique_values: tuple[float, ...]

    @model_validator(mode="after")
    def _check_range(self) -> "FpStats":
        if self.min_value > self.max_value:
            msg = "min_value must not exceed max_value"
            raise ValueError(msg)
        return self


class PoisonReport(BaseModel):
    """How many rows an attack targeted and how many it changed."""

    model_config = ConfigDict(frozen=True)

    requested_percent: float
    num_values: int = Field(ge=0)
    num_actually_modified: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_counts(self) -> "PoisonReport":
        if self.num_actually_modified > self.num_values:
            msg = "num_actually_modified cannot exceed num_values"
            raise ValueError(msg)
        return self


def num_poison(n: int, percent: float) -> int:
    """Number of values to poison: floor(n * percent / 100).

    The percentage is read through its decimal representation so that e.g.
    2.3 % of 1000 rows is 23, not 22.
    """
    if n < 0 or not 0.0 <= percent <= 100.0:  # noqa: PLR2004
        msg = f"need n >= 0 and 0 <= percent <= 100, got n={n}, percent={percent}"
        raise ValueError(msg)
    return math.floor(n * Fraction(repr(float(percent))) / 100)


def _require_rows(shard: Dataset) -> None:
    if shard.n == 0:
        msg = "cannot poison an empty shard"
        raise DatasetError(msg)


def _require_feature(ds: Dataset, feature_index: Optional[int]) -> int:
    if feature_index is None or not 0 <= feature_index < ds.d:
        msg = f"feature index {feature_index} is not valid for {ds.d} features"
        raise AttackError(msg)
    return feature_index


def flip_labels(shard: Dataset, percent: float, seed: int) -> tuple[Dataset, PoisonReport]:
    """Complement the labels of floor(n * percent / 100) rows chosen without replacement.

    Features are never touched.
    """
    _require_rows(shard)
    count = num_poison(shard.n, percent)
    report = PoisonReport(requested_percent=percent, num_values=count, num_actually_modified=count)
    if count == 0:
        return shard, report

    rows = np.random.default_rng(seed).choice(shard.n, size=count, replace=False)
    y = shard.y.copy()
    y[rows] = 1 - y[rows]
    logger.debug("Flipped %d of %d labels (%.2f%%)", count, shard.n, percent)
    return shard.with_labels(y), report


def compute_fp_stats(shard: Dataset, feature_index: int) -> FpStats:
    """Min, max and class-conditional means of one column, plus the replacement pool.

    The pool holds the distinct label-0 values of the original column,
    min-max normalized with the column's min and max, in ascending order.

    Raises:
        AttackError: If the feature index is out of range
        MissingClassError: If either label is absent
        DegenerateColumnError: If the column is constant
    """
    _require_rows(shard)
    j = _require_feature(shard, feature_index)
    zeros, ones = shard.label_counts()
    if zeros == 0 or ones == 0:
        msg = f"FP needs both labels in the shard (benign={zeros}, malicious={ones})"
        raise MissingClassError(msg)

    column = shard.X[:, j]
    low, high = float(column.min()), float(column.max())
    if high == low:
        msg = f"feature {shard.feature_names[j]!r} is constant ({low}); cannot normalize"
        raise DegenerateColumnError(msg)

    span = high - low
    benign = column[shard.y == 0]
    average_zero = float(benign.mean())
    average_one = float(column[shard.y == 1].mean())
    pool = (np.unique(benign) - low) / span
    return FpStats(
        min_value=low,
        max_value=high,
        average_zero=average_zero,
        average_one=average_one,
        normalized_avg_zero=(average_zero - low) / span,
        normalized_avg_one=(average_one - low) / span,
        unique_values=tuple(float(v) for v in pool),
    )


def fp_poison(shard: Dataset, spec: AttackSpec) -> tuple[Dataset, FpStats, PoisonReport]:
    """Feature-poisoning attack on one column.

    First every value of the column is replaced by its class's normalized
    mean (the mean fill, skipped when ``spec.step3_always`` is off). Then the
    first floor(n * P / 100) rows are scanned in shard order; each scanned row
    consumes one random pool index (drawn as one block up front) and label-1
    rows take the pool value at that index. Labels never change.
    """
    if spec.kind is not AttackKind.FP:
        msg = f"fp_poison called with a {spec.kind.value} attack"
        raise AttackError(msg)
    j = _require_feature(shard, spec.feature_index)
    stats = compute_fp_stats(shard, j)

    y = shard.y
    column = shard.X[:, j].copy()
    if spec.step3_always:
        column = np.where(y == 0, stats.normalized_avg_zero, stats.normalized_avg_one)

    count = num_poison(shard.n, spec.percent)
    pool = np.asarray(stats.unique_values)
    picks = np.random.default_rng(spec.seed).integers(0, pool.shape[0], size=count)
    scanned = np.arange(count)
    malicious = scanned[y[:count] == 1]
    column[malicious] = pool[picks[malicious]]

    report = PoisonReport(
        requested_percent=spec.percent,
        num_values=count,
        num_actually_modified=int(malicious.shape[0]),
    )
    logger.debug(
        "FP on %r: scanned %d rows, rewrote %d malicious values",
        shard.feature_names[j],
        count,
        report.num_actually_modified,
    )
    return shard.with_column(j, column), stats, report


def lf_asr_testset(test: Dataset) -> Dataset:
    """Complement every test label."""
    _require_rows(test)
    return test.with_labels(1 - test.y)


def fp_asr_testset(test: Dataset, feature_index: int, stats: FpStats) -> Dataset:
    """Swap class means: label-0 rows get the label-1 mean and vice versa."""
    j = _require_feature(test, feature_index)
    swapped = np.where(test.y == 0, stats.normalized_avg_one, stats.normalized_avg_zero)
    return test.with_column(j, swapped)


def asr(params: Bau1Params, transformed_test: Dataset) -> float:
    """Attack success rate: accuracy on the attack-specific transformed test set."""
    return evaluate(params, transformed_test)
