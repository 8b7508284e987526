"""Append-only JSON-lines event log for experiment runs."""

import json
import logging
import sys
from pathlib import Path
from typing import Optional, TextIO, Union

from .event import Event
from .metadata import Metadata
from .stream import StreamName

logger = logging.getLogger(__name__)


class EventLog:
    """Writes events to ``<directory>/<stream>.jsonl``, one JSON object per line.

    Each line carries ``Type`` (event class name), ``Data`` (PascalCase event
    fields) and ``Metadata``. With ``echo`` on, a one-line summary also goes
    to standard output.
    """

    def __init__(
        self,
        directory: Union[str, Path],
        echo: bool = False,
        out: Optional[TextIO] = None,
    ) -> None:
        """Initialize the event log.

        Args:
            directory: Directory holding one file per stream (created if missing)
            echo: Also print a summary line per event
            out: Echo target, standard output by default
        """
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.echo = echo
        self._out = out
        self._positions: dict[str, int] = {}

    def path_for(self, stream: Union[str, StreamName]) -> Path:
        """File backing ``stream``."""
        return self.directory / f"{stream}.jsonl"

    def append_to_stream(
        self,
        stream: Union[str, StreamName],
        event: Event,
        metadata: Optional[Metadata] = None,
    ) -> int:
        """Append an event to a stream.

        Args:
            stream: Stream name or StreamName object
            event: Event to append
            metadata: Optional metadata; defaults to an uncorrelated Metadata

        Returns:
            Zero-based position of the event within the stream for this log
        """
        stream_name = str(stream)
        enriched = (metadata or Metadata.default()).enrich(str(event.id).lower())
        record = {
            "Type": event.__class__.__name__,
            "Data": event.model_dump(by_alias=True, mode="json"),
            "Metadata": enriched,
        }
        with self.path_for(stream_name).open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record) + "\n")

        position = self._positions.get(stream_name, 0)
        self._positions[stream_name] = position + 1
        if self.echo:
            target = self._out or sys.stdout
            target.write(f"[{stream_name}] {event.summary()}\n")
            target.flush()
        logger.debug("Appended %s to %s at %d", record["Type"], stream_name, position)
        return position

    def close(self) -> None:
        """Flush the echo target."""
        if self.echo:
            (self._out or sys.stdout).flush()

    def __enter__(self) -> "EventLog":
        """Context manager entry."""
        return self

    def __exit__(self, *args: object) -> None:
        """Context manager exit."""
        self.close()
