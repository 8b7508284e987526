"""Metadata attached to every logged run event."""

import socket
from datetime import datetime, timezone
from typing import Any, Optional


class Metadata:
    """Event metadata container with automatic enrichment.

    All events of one experiment share ``correlation_id``; each event is its
    own cause.
    """

    def __init__(self, correlation_id: Optional[str] = None, **kwargs: Any) -> None:  # noqa: ANN401
        """Initialize metadata.

        Args:
            correlation_id: Identifier shared by all events of one experiment
            **kwargs: Custom metadata key-value pairs (e.g. seed, scenario)
        """
        self.correlation_id = correlation_id
        self._data = kwargs

    def enrich(self, event_id: str) -> dict[str, Any]:
        """Enrich metadata with standard fields.

        Args:
            event_id: The event's unique identifier

        Returns:
            Complete metadata dictionary with standard fields
        """
        created = datetime.now(timezone.utc).astimezone().isoformat()
        metadata = {
            "Created": created,
            "ClientHostName": socket.gethostname(),
            "$correlationId": self.correlation_id or event_id,
            "$causationId": event_id,
        }
        metadata.update(self._data)
        return metadata

    @staticmethod
    def default() -> "Metadata":
        """Create default empty metadata."""
        return Metadata()
