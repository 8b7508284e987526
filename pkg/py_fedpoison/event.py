"""Run events emitted while experiments execute, using Pydantic v2."""

from typing import Optional
from uuid import UUID, uuid4

from pydantic import BaseModel, ConfigDict, Field, field_serializer
from pydantic.alias_generators import to_pascal


class Event(BaseModel):
    """Base class for all run events.

    Each instance gets a lowercase UUID id. Fields are snake_case in Python
    and serialize to PascalCase in the event log.

    Example:
        >>> event = RoundCompleted(round=3, client_losses=(0.64, 0.65), server_val_accuracy=0.97)
        >>> event.model_dump(by_alias=True)["ServerValAccuracy"]
        0.97
    """

    model_config = ConfigDict(
        alias_generator=to_pascal,
        populate_by_name=True,
        use_enum_values=True,
        frozen=True,
    )

    id: UUID = Field(default_factory=uuid4)

    @field_serializer("id")
    def serialize_id(self, value: UUID) -> str:
        """Serialize UUID as lowercase string with dashes."""
        return str(value).lower()

    def summary(self) -> str:
        """One-line human readable rendering for console echo."""
        fields = self.model_dump(exclude={"id"})
        body = " ".join(f"{key}={value}" for key, value in fields.items())
        return f"{self.__class__.__name__} {body}"


class PoisonApplied(Event):
    """A client shard was poisoned before round 1."""

    kind: str
    target_client: int
    requested_percent: float
    num_values: int
    num_actually_modified: int
    feature_index: Optional[int] = None


class RoundCompleted(Event):
    """One FedAvg round finished."""

    round: int
    client_losses: tuple[float, ...]
    server_val_accuracy: float


class ExperimentCompleted(Event):
    """Final server evaluation of an experiment."""

    rounds: int
    learning_rate_used: float
    server_test_accuracy: float
    asr: Optional[float] = None
