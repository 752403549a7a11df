"""Shared event vocabulary, NDJSON wire format, and topic taxonomy.

Every message exchanged between the simulator, the stream-processing
engine, the controllers, and the dashboard gateway is an :class:`Event`.
Events are immutable values; the wire format is one JSON object per line
(NDJSON), which doubles as the on-disk log and replay format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional


class MalformedEvent(ValueError):
    """Input line is not a single well-formed JSON event object."""


class UnknownKind(ValueError):
    """Event kind is outside the closed enumeration."""


class InvariantViolation(ValueError):
    """Event fields violate the schema invariants (e.g. certainty > 1)."""


class EventKind(str, Enum):
    SENSOR_READING = "SensorReading"
    CONGESTION = "Congestion"
    CLEAR_CONGESTION = "ClearCongestion"
    PREDICTED_CONGESTION = "PredictedCongestion"
    PREDICTED_RAMP_OVERFLOW = "PredictedRampOverflow"
    CALCULATION = "Calculation"
    RAMP_COORDINATION = "RampCoordination"
    CLEAR_RAMP_COORDINATION = "ClearRampCoordination"
    CONTROL_COMMAND = "ControlCommand"
    OPERATOR_ACTION = "OperatorAction"


class Topic(str, Enum):
    SENSORS = "sensors"
    DERIVED = "derived"
    COMMANDS = "commands"
    OPERATOR = "operator"


#: Kinds that carry a certainty attribute; all others are deterministic
#: facts and carry none (the distinction is structural, not a 1.0 default).
FORECAST_KINDS = frozenset({EventKind.PREDICTED_CONGESTION, EventKind.PREDICTED_RAMP_OVERFLOW})

KIND_TO_TOPIC: Mapping[EventKind, Topic] = {
    EventKind.SENSOR_READING: Topic.SENSORS,
    EventKind.CONGESTION: Topic.DERIVED,
    EventKind.CLEAR_CONGESTION: Topic.DERIVED,
    EventKind.PREDICTED_CONGESTION: Topic.DERIVED,
    EventKind.PREDICTED_RAMP_OVERFLOW: Topic.DERIVED,
    EventKind.CALCULATION: Topic.DERIVED,
    EventKind.CONTROL_COMMAND: Topic.COMMANDS,
    EventKind.RAMP_COORDINATION: Topic.COMMANDS,
    EventKind.CLEAR_RAMP_COORDINATION: Topic.COMMANDS,
    EventKind.OPERATOR_ACTION: Topic.OPERATOR,
}


@dataclass(frozen=True, eq=True)
class Event:
    """One timestamped occurrence on the bus.

    timestamp is simulation time in whole seconds, location is a cell or
    ramp index (kind-scoped), attributes is a flat name -> number map.
    """

    id: str
    kind: EventKind
    timestamp: int
    location: int
    attributes: Mapping[str, float] = field(default_factory=dict)
    certainty: Optional[float] = None

    def validate(self) -> "Event":
        if not isinstance(self.id, str) or not self.id:
            raise InvariantViolation("event id must be a non-empty string")
        if not isinstance(self.kind, EventKind):
            raise UnknownKind(f"unknown event kind: {self.kind!r}")
        if not isinstance(self.timestamp, int) or isinstance(self.timestamp, bool) or self.timestamp < 0:
            raise InvariantViolation(f"timestamp must be a non-negative integer, got {self.timestamp!r}")
        if not isinstance(self.location, int) or isinstance(self.location, bool) or self.location < 0:
            raise InvariantViolation(f"location must be a non-negative integer, got {self.location!r}")
        for name, value in self.attributes.items():
            if not isinstance(name, str):
                raise InvariantViolation(f"attribute name must be a string, got {name!r}")
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise InvariantViolation(f"attribute {name} must be a finite number, got {value!r}")
        if self.kind in FORECAST_KINDS:
            if self.certainty is None:
                raise InvariantViolation(f"{self.kind.value} requires a certainty")
            if not (0.0 <= self.certainty <= 1.0):
                raise InvariantViolation(f"certainty must lie in [0, 1], got {self.certainty}")
        elif self.certainty is not None:
            raise InvariantViolation(f"{self.kind.value} is deterministic and must not carry a certainty")
        return self

    @property
    def topic(self) -> Topic:
        return KIND_TO_TOPIC[self.kind]


def topic_for(kind: EventKind) -> Topic:
    """Total, deterministic kind -> topic mapping."""
    return KIND_TO_TOPIC[kind]


def serialize_event(e: Event) -> bytes:
    """Encode an event as one NDJSON line (UTF-8, trailing newline)."""
    e.validate()
    payload = {
        "id": e.id,
        "kind": e.kind.value,
        "timestamp": e.timestamp,
        "location": e.location,
        "attributes": {k: float(v) for k, v in e.attributes.items()},
    }
    if e.certainty is not None:
        payload["certainty"] = float(e.certainty)
    return (json.dumps(payload, separators=(",", ":")) + "\n").encode("utf-8")


def deserialize_event(b: bytes | str) -> Event:
    """Inverse of :func:`serialize_event`; rejects anything off-schema."""
    if isinstance(b, bytes):
        try:
            text = b.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedEvent(f"not valid UTF-8: {exc}") from exc
    else:
        text = b
    text = text.strip("\r\n")
    if "\n" in text:
        raise MalformedEvent("expected exactly one JSON object per line")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedEvent(f"bad JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedEvent("event line must be a JSON object")
    unknown = set(raw) - {"id", "kind", "timestamp", "location", "attributes", "certainty"}
    if unknown:
        raise MalformedEvent(f"unexpected fields: {sorted(unknown)}")
    try:
        kind = EventKind(raw["kind"])
    except (KeyError, ValueError) as exc:
        raise UnknownKind(f"unknown event kind: {raw.get('kind')!r}") from exc
    missing = {"id", "timestamp", "location"} - set(raw)
    if missing:
        raise MalformedEvent(f"missing fields: {sorted(missing)}")
    attributes = raw.get("attributes", {})
    if not isinstance(attributes, dict):
        raise MalformedEvent("attributes must be an object")
    certainty = raw.get("certainty")
    if certainty is not None and not isinstance(certainty, (int, float)):
        raise InvariantViolation("certainty must be a number")
    event = Event(
        id=raw["id"] if isinstance(raw["id"], str) else str(raw["id"]),
        kind=kind,
        timestamp=raw["timestamp"],
        location=raw["location"],
        attributes={str(k): float(v) for k, v in attributes.items()},
        certainty=float(certainty) if certainty is not None else None,
    )
    return event.validate()


class EventFactory:
    """Mints events with deterministic sequential ids for one producer."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._seq = 0

    def make(
        self,
        kind: EventKind,
        timestamp: int,
        location: int,
        attributes: Optional[Mapping[str, float]] = None,
        certainty: Optional[float] = None,
    ) -> Event:
        self._seq += 1
        return Event(
            id=f"{self.prefix}-{self._seq:08d}",
            kind=kind,
            timestamp=timestamp,
            location=location,
            attributes=dict(attributes or {}),
            certainty=certainty,
        ).validate()
