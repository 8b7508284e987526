"""Experiment records, the success rule and the results.csv format."""

import logging
import re
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Optional, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .attacks import AttackSpec
from .federation import ExperimentOutcome

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 0.40
DEFAULT_CSV_CLIENTS = 2
_LOSS_COLUMN = re.compile(r"^client_(\d+)_loss$")

RecordKey = tuple[str, float]


class SuccessRule(BaseModel):
    """An attack succeeds when both accuracy and ASR reach ``threshold``."""

    model_config = ConfigDict(frozen=True)

    threshold: float = Field(default=SUCCESS_THRESHOLD, ge=0.0, le=1.0)


class ExperimentRecord(BaseModel):
    """One row of results.csv.

    Example:
        >>> ExperimentRecord(
        ...     scenario_id="N_BAU1^{CIC-LF}", poison_percent=1.0, client_losses=(0.69, 0.68),
        ...     server_accuracy=0.0428, asr=0.9564, success=False, learning_rate_used=0.005, seed=0,
        ... ).key
        ('N_BAU1^{CIC-LF}', 1.0)
    """

    model_config = ConfigDict(frozen=True)

    scenario_id: str = Field(min_length=1)
    poison_percent: float = Field(ge=0.0, le=100.0)
    client_losses: tuple[float, ...] = Field(min_length=1)
    server_accuracy: float = Field(ge=0.0, le=1.0)
    asr: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    success: Optional[bool] = None
    learning_rate_used: float = Field(gt=0.0)
    seed: int

    @model_validator(mode="after")
    def _success_iff_asr(self) -> "ExperimentRecord":
        if (self.asr is None) != (self.success is None):
            msg = "success must be present exactly when asr is present"
            raise ValueError(msg)
        return self

    @property
    def key(self) -> RecordKey:
        """Sort and de-duplication key: (scenario, percent)."""
        return self.scenario_id, self.poison_percent


def classify_success(accuracy: float, asr: float, rule: Optional[SuccessRule] = None) -> bool:
    """True iff accuracy >= threshold and asr >= threshold (both inclusive)."""
    threshold = (rule or SuccessRule()).threshold
    return accuracy >= threshold and asr >= threshold


def scenario_id(dataset_name: str, attack: Optional[AttackSpec] = None) -> str:
    """``N_BAU1^{CIC}`` for a clean run, ``N_BAU1^{CIC-LF}`` for an attacked one."""
    if attack is None:
        return f"N_BAU1^{{{dataset_name}}}"
    return f"N_BAU1^{{{dataset_name}-{attack.kind.value}}}"


def build_record(
    outcome: ExperimentOutcome,
    dataset_name: str,
    attack: Optional[AttackSpec],
    seed: int,
    rule: Optional[SuccessRule] = None,
) -> ExperimentRecord:
    """Turn an experiment outcome into a results row."""
    success = None
    if outcome.asr is not None:
        success = classify_success(outcome.server_test_accuracy, outcome.asr, rule)
    return ExperimentRecord(
        scenario_id=scenario_id(dataset_name, attack),
        poison_percent=attack.percent if attack is not None else 0.0,
        client_losses=outcome.final_client_losses,
        server_accuracy=outcome.server_test_accuracy,
        asr=outcome.asr,
        success=success,
        learning_rate_used=outcome.learning_rate_used,
        seed=seed,
    )


def sort_records(records: Iterable[ExperimentRecord]) -> list[ExperimentRecord]:
    """Records ordered by (scenario_id, poison_percent)."""
    return sorted(records, key=lambda record: record.key)


def merge_records(
    existing: Iterable[ExperimentRecord],
    new: Iterable[ExperimentRecord],
) -> list[ExperimentRecord]:
    """Union keyed by (scenario, percent); a new record replaces an existing one."""
    merged = {record.key: record for record in existing}
    merged.update((record.key, record) for record in new)
    return sort_records(merged.values())


def csv_columns(num_clients: int = DEFAULT_CSV_CLIENTS) -> list[str]:
    """Column order of results.csv."""
    losses = [f"client_{i}_loss" for i in range(1, num_clients + 1)]
    return [
        "scenario_id",
        "poison_percent",
        *losses,
        "server_accuracy",
        "asr",
        "success",
        "learning_rate_used",
        "seed",
    ]


def _format_success(success: Optional[bool]) -> str:
    if success is None:
        return ""
    return "true" if success else "false"


def export_csv(
    records: Sequence[ExperimentRecord],
    path: Union[str, Path],
    num_clients: Optional[int] = None,
) -> None:
    """Write records sorted by (scenario, percent).

    Reals are rendered with 4 decimals, the learning rate in 4-decimal
    scientific notation. Absent ASR and success are empty cells.

    Raises:
        ValueError: If records disagree on the number of clients
    """
    widths = {len(record.client_losses) for record in records}
    if len(widths) > 1:
        msg = f"records mix client counts {sorted(widths)}"
        raise ValueError(msg)
    if num_clients is None:
        num_clients = widths.pop() if widths else DEFAULT_CSV_CLIENTS
    elif widths and widths != {num_clients}:
        msg = f"records have {widths.pop()} client losses, expected {num_clients}"
        raise ValueError(msg)

    columns = csv_columns(num_clients)
    rows = []
    for record in sort_records(records):
        rows.append(
            [
                record.scenario_id,
                f"{record.poison_percent:.4f}",
                *(f"{loss:.4f}" for loss in record.client_losses),
                f"{record.server_accuracy:.4f}",
                "" if record.asr is None else f"{record.asr:.4f}",
                _format_success(record.success),
                f"{record.learning_rate_used:.4e}",
                str(record.seed),
            ],
        )
    frame = pd.DataFrame(rows, columns=columns, dtype=str)
    path = Path(path)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.debug("Wrote %d records to %s", len(rows), path)


def _parse_success(cell: str) -> Optional[bool]:
    if cell == "":
        return None
    if cell in ("true", "false"):
        return cell == "true"
    msg = f"success cell must be true, false or empty, got {cell!r}"
    raise ValueError(msg)


def parse_csv(path: Union[str, Path]) -> list[ExperimentRecord]:
    """Read records written by :func:`export_csv`.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the header lacks a required column or a cell is malformed
    """
    path = Path(path)
    if not path.is_file():
        msg = f"results file not found: {path}"
        raise FileNotFoundError(msg)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)

    loss_columns = sorted(
        (column for column in frame.columns if _LOSS_COLUMN.match(column)),
        key=lambda column: int(_LOSS_COLUMN.match(column).group(1)),  # type: ignore[union-attr]
    )
    missing = [c for c in csv_columns(0) if c not in frame.columns]
    if missing or not loss_columns:
        msg = f"{path}: missing columns {missing or ['client_<i>_loss']}"
        raise ValueError(msg)

    records = []
    for row in frame.itertuples(index=False):
        cells = row._asdict()
        records.append(
            ExperimentRecord(
                scenario_id=cells["scenario_id"],
                poison_percent=float(cells["poison_percent"]),
                client_losses=tuple(float(cells[column]) for column in loss_columns),
                server_accuracy=float(cells["server_accuracy"]),
                asr=float(cells["asr"]) if cells["asr"] != "" else None,
                success=_parse_success(cells["success"]),
                learning_rate_used=float(cells["learning_rate_used"]),
                seed=int(cells["seed"]),
            ),
        )
    return records
