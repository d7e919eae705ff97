"""Append-only JSONL event stream for training and evaluation runs."""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class RunLog:
    """Writes one JSON object per event: ``{"ts": ..., "event": ..., **fields}``.

    ``path=None`` keeps events in memory only, which is what library callers
    and tests use. Events are always retained in ``events`` as well.
    """

    path: Path | None = None
    events: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log_event(self, event: str, **details: Any) -> None:
        record = {"ts": time.time(), "event": event, **details}
        self.events.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def of_kind(self, event: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["event"] == event]


def read_events(path: Path) -> list[dict[str, Any]]:
    events = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                events.append(json.loads(line))
    return events


def deterministic_view(events: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Events without wall-clock fields, for comparing repeated runs."""
    return [{k: v for k, v in e.items() if k not in ("ts", "elapsed_s")} for e in events]
