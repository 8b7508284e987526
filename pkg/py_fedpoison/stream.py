"""Event stream names for run logs."""

import re
from typing import Optional

_UNSAFE = re.compile(r"[^a-z0-9]+")


class StreamName:
    """An event stream name following the {Category}-{StreamId} convention.

    The stream name doubles as the log file stem, so ids are kept file-safe.
    """

    def __init__(self, category: str, stream_id: str) -> None:
        """Initialize a stream name.

        Args:
            category: The stream category (e.g. "Experiment", "Sweep")
            stream_id: The stream identifier within the category
        """
        if not category:
            msg = "Category cannot be empty"
            raise ValueError(msg)
        if not stream_id:
            msg = "Stream ID cannot be empty"
            raise ValueError(msg)

        self.category = category
        self.stream_id = stream_id

    def __str__(self) -> str:
        """Return the formatted stream name."""
        return f"{self.category}-{self.stream_id}"

    def __repr__(self) -> str:
        """Return string representation for debugging."""
        return f"StreamName(category='{self.category}', stream_id='{self.stream_id}')"

    @classmethod
    def for_experiment(cls, scenario_id: str, percent: Optional[float] = None) -> "StreamName":
        """Stream for one experiment, e.g. ``Experiment-n_bau1_cic_lf-p2_5``."""
        slug = _UNSAFE.sub("_", scenario_id.lower()).strip("_")
        if percent is not None:
            slug = f"{slug}-p{percent:g}".replace(".", "_")
        return cls(category="Experiment", stream_id=slug)
