"""In-process publish/subscribe event bus with NDJSON replay.

Dispatch is synchronous: a publish call delivers to every subscriber of
the topic, in subscription order, before returning, and appends the event
to the log sink exactly once.  That makes a whole tick's dataflow a pure
function of its inputs, which is what the byte-identical replay guarantee
rests on.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Optional

from .events import (
    Event,
    MalformedEvent,
    Topic,
    deserialize_event,
    serialize_event,
    topic_for,
)


class UnknownTopic(KeyError):
    pass


class NonMonotoneTimestamps(ValueError):
    pass


Subscriber = Callable[[Event], None]


class Bus:
    def __init__(self, sink: Optional[BinaryIO] = None):
        self._subscribers: dict[Topic, list[Subscriber]] = {t: [] for t in Topic}
        self._sequence: dict[Topic, int] = {t: 0 for t in Topic}
        self.log: list[Event] = []
        self._sink = sink

    def subscribe(self, topic: Topic, callback: Subscriber) -> None:
        if topic not in self._subscribers:
            raise UnknownTopic(str(topic))
        self._subscribers[topic].append(callback)

    def publish(self, topic: Topic, event: Event) -> int:
        if topic not in self._subscribers:
            raise UnknownTopic(str(topic))
        event.validate()
        self._sequence[topic] += 1
        seq = self._sequence[topic]
        self.log.append(event)
        if self._sink is not None:
            self._sink.write(serialize_event(event))
        for callback in list(self._subscribers[topic]):
            callback(event)
        return seq

    def publish_event(self, event: Event) -> int:
        """Publish on the topic implied by the event kind."""
        return self.publish(topic_for(event.kind), event)

    def sequence(self, topic: Topic) -> int:
        return self._sequence[topic]


def write_event_log(path: str | Path, events: Iterable[Event]) -> None:
    with open(path, "wb") as fh:
        for e in events:
            fh.write(serialize_event(e))


def read_event_log(path: str | Path) -> list[Event]:
    events = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                events.append(deserialize_event(line))
            except MalformedEvent as exc:
                raise MalformedEvent(f"line {lineno}: {exc}") from exc
    return events


def replay(path: str | Path, bus: Bus, realtime: bool = False) -> int:
    """Publish a recorded NDJSON stream onto the bus, preserving order.

    Timestamps must be non-decreasing; in realtime mode publishing is
    paced by the timestamp deltas.  Returns the number of events.
    """
    last_ts: Optional[int] = None
    count = 0
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                event = deserialize_event(line)
            except MalformedEvent as exc:
                raise MalformedEvent(f"line {lineno}: {exc}") from exc
            if last_ts is not None and event.timestamp < last_ts:
                raise NonMonotoneTimestamps(
                    f"line {lineno}: timestamp {event.timestamp} after {last_ts}"
                )
            if realtime and last_ts is not None and event.timestamp > last_ts:
                time.sleep(event.timestamp - last_ts)
            last_ts = event.timestamp
            bus.publish_event(event)
            count += 1
    return count
