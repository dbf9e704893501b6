"""Totally ordered event log shared by the server, agents and simulator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

log = logging.getLogger("vmguard.events")


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    actor: str
    kind: str
    digest: str = ""
    detail: str = ""  # sorted key=value pairs separated by ';'

    def line(self) -> str:
        return f"{self.tick}\t{self.actor}\t{self.kind}\t{self.digest}\t{self.detail}"

    def field(self, key: str) -> str | None:
        for part in self.detail.split(";"):
            k, sep, v = part.partition("=")
            if sep and k == key:
                return v
        return None


def format_detail(detail: dict) -> str:
    return ";".join(f"{k}={detail[k]}" for k in sorted(detail))


class EventLog:
    """Collects events in emission order. With ``keep=False`` events are only
    logged, which is what the long-running services use."""

    def __init__(self, keep: bool = True):
        self.keep = keep
        self.events: list[TraceEvent] = []

    def emit(self, tick: int, actor: str, kind: str, digest: str = "", **detail) -> TraceEvent:
        event = TraceEvent(tick, actor, kind, digest, format_detail(detail))
        if self.keep:
            if self.events and tick < self.events[-1].tick:
                raise ValueError(f"event at tick {tick} after tick {self.events[-1].tick}")
            self.events.append(event)
        log.debug("%s", event.line())
        return event

    def of_kind(self, *kinds: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def text(self) -> str:
        return "".join(e.line() + "\n" for e in self.events)
