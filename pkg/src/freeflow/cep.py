"""Event processing network: windowed detection and trend forecasting.

Four agents run per monitored location, with exactly these semantics
(shared by the brute-force test oracle):

Congestion (threshold window, suppressed while an episode is live):
  A reading *matches* when density > density_threshold1 and speed <
  speed_threshold1.  The first matching reading opens a window; a window
  expires (silently) when a reading arrives more than ``window_seconds``
  after it opened, and the next matching reading opens a fresh one.
  Non-matching readings inside the window are absorbed.  When the window
  accumulates ``match_count`` matching readings, Congestion is emitted
  with the last reading's timestamp and the episode becomes live until
  ClearCongestion.

ClearCongestion (threshold window, gated):
  Its window opens only when Congestion or PredictedCongestion is emitted
  at the location (re-anchored by each Congestion).  A reading matches
  when density < density_threshold2 and speed > speed_threshold2.  While
  an episode is live an expired window immediately re-opens at the next
  reading; with no live episode it closes silently.  ``match_count``
  matches emit ClearCongestion and end the episode.

PredictedCongestion (trend):
  A window opens with the first reading after the previous window closed
  (windows close when Congestion or ClearCongestion fires here; the
  closing reading is consumed).  Within a window, n is the longest run of
  consecutive strictly-increasing density readings, counted in increase
  steps; whenever n reaches ``trend_min_increases`` and exceeds the last
  emitted n, the agent (re-)emits with certainty 1/(1+exp(-a*(n-n0))) and
  a stable per-window episode id.  Each emission also opens the
  ClearCongestion window if it is closed.

PredictedRampOverflow (trend on queue estimates):
  Same run counting over Calculation events carrying a queue_estimate,
  emitting only while the latest estimate is at least
  ``overflow_queue_fraction`` of the ramp's capacity.  A broken run after
  an emission starts a new episode with the counters cleared.

Calculations:
  Per location and tick, the rolling mean of density/speed/flow over the
  readings of the last ``avg_window_seconds`` (window half-open: strictly
  newer than t - 60 s, up to t), with a count attribute.

Every derived event carries the timestamp of the last contributing input
event.  ``epn_step`` canonicalizes input order by (timestamp, location,
kind, id) and output order by (timestamp, location, kind, agent), so any
arrival order within a tick yields byte-identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .events import Event, EventFactory, EventKind


@dataclass(frozen=True)
class CepConfig:
    density_threshold1: float  # veh/km, congestion onset
    speed_threshold1: float  # km/h, congestion onset
    density_threshold2: float  # veh/km, congestion cleared
    speed_threshold2: float  # km/h, congestion cleared
    match_count: int = 15
    window_seconds: int = 300
    trend_min_increases: int = 5
    sigmoid_a: float = 1.0
    sigmoid_n0: float = 5.0
    overflow_queue_fraction: float = 0.6
    avg_window_seconds: int = 60
    ramp_max_queues: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.match_count < 1 or self.trend_min_increases < 1:
            raise ValueError("match counts must be at least 1")
        if self.window_seconds <= 0 or self.avg_window_seconds <= 0:
            raise ValueError("window durations must be positive")
        if self.density_threshold2 > self.density_threshold1:
            raise ValueError("clear density threshold must not exceed the onset threshold")
        if self.speed_threshold2 < self.speed_threshold1:
            raise ValueError("clear speed threshold must not undercut the onset threshold")


def sigmoid_certainty(n: int, a: float = 1.0, n0: float = 5.0) -> float:
    """Forecast confidence from the trend length; always inside (0, 1)."""
    value = 1.0 / (1.0 + math.exp(-a * (n - n0)))
    return min(max(value, 1e-12), 1.0 - 1e-12)


@dataclass
class _ThresholdWindow:
    opened_at: Optional[int] = None
    count: int = 0

    def reset(self) -> None:
        self.opened_at = None
        self.count = 0


@dataclass
class _TrendState:
    active: bool = False
    skip_next_open: bool = False
    last_value: float = 0.0
    run: int = 0
    best: int = 0
    last_emitted: int = 0
    episode: int = 0


@dataclass
class _LocationState:
    congestion_live: bool = False
    onset: _ThresholdWindow = field(default_factory=_ThresholdWindow)
    clear: _ThresholdWindow = field(default_factory=_ThresholdWindow)
    trend: _TrendState = field(default_factory=_TrendState)
    recent: list[tuple[int, float, float, float]] = field(default_factory=list)


def _input_sort_key(e: Event):
    return (e.timestamp, e.location, e.kind.value, e.id)


def _output_sort_key(item: tuple[Event, str]):
    e, agent = item
    return (e.timestamp, e.location, e.kind.value, agent)


class EventProcessingNetwork:
    def __init__(self, config: CepConfig, factory: Optional[EventFactory] = None):
        self.config = config
        self.factory = factory or EventFactory("cep")
        self._cells: dict[int, _LocationState] = {}
        self._ramps: dict[int, _TrendState] = {}

    def _cell(self, location: int) -> _LocationState:
        return self._cells.setdefault(location, _LocationState())

    def _ramp(self, location: int) -> _TrendState:
        return self._ramps.setdefault(location, _TrendState())

    def _process_reading(self, e: Event) -> list[tuple[dict, str]]:
        cfg = self.config
        s = self._cell(e.location)
        t = e.timestamp
        density = float(e.attributes.get("density", 0.0))
        speed = float(e.attributes.get("speed", 0.0))
        flow = float(e.attributes.get("flow", density * speed))
        out: list[tuple[dict, str]] = []
        fired_threshold = False

        # Congestion onset agent.
        if not s.congestion_live:
            if s.onset.opened_at is not None and t > s.onset.opened_at + cfg.window_seconds:
                s.onset.reset()
            if density > cfg.density_threshold1 and speed < cfg.speed_threshold1:
                if s.onset.opened_at is None:
                    s.onset.opened_at = t
                s.onset.count += 1
                if s.onset.count >= cfg.match_count:
                    out.append(
                        (
                            dict(
                                kind=EventKind.CONGESTION,
                                timestamp=t,
                                location=e.location,
                                attributes={"density": density, "speed": speed},
                            ),
                            "congestion",
                        )
                    )
                    s.congestion_live = True
                    s.onset.reset()
                    s.clear.opened_at = t  # clearing window re-anchors on detection
                    s.clear.count = 0
                    fired_threshold = True

        # Clearing agent (window exists only after Congestion/PredictedCongestion).
        if s.clear.opened_at is not None and t > s.clear.opened_at + cfg.window_seconds:
            if s.congestion_live:
                s.clear.opened_at = t  # roll the window while the episode lives
                s.clear.count = 0
            else:
                s.clear.reset()
        if s.clear.opened_at is not None and not fired_threshold:
            if density < cfg.density_threshold2 and speed > cfg.speed_threshold2:
                s.clear.count += 1
                if s.clear.count >= cfg.match_count:
                    out.append(
                        (
                            dict(
                                kind=EventKind.CLEAR_CONGESTION,
                                timestamp=t,
                                location=e.location,
                                attributes={"density": density, "speed": speed},
                            ),
                            "clear",
                        )
                    )
                    s.congestion_live = False
                    s.clear.reset()
                    s.onset.reset()
                    fired_threshold = True

        # Trend agent: closed by a detection at this location, the closing
        # reading is consumed and the next one opens the new window.
        if fired_threshold:
            s.trend.active = False
            s.trend.skip_next_open = False
        elif not s.trend.active:
            s.trend.active = True
            s.trend.last_value = density
            s.trend.run = 0
            s.trend.best = 0
            s.trend.last_emitted = 0
            s.trend.episode += 1
        else:
            if density > s.trend.last_value:
                s.trend.run += 1
            else:
                s.trend.run = 0
            s.trend.best = max(s.trend.best, s.trend.run)
            s.trend.last_value = density
            if s.trend.best >= cfg.trend_min_increases and s.trend.best > s.trend.last_emitted:
                s.trend.last_emitted = s.trend.best
                out.append(
                    (
                        dict(
                            kind=EventKind.PREDICTED_CONGESTION,
                            timestamp=t,
                            location=e.location,
                            attributes={
                                "trend_length": float(s.trend.best),
                                "episode": float(s.trend.episode),
                                "density": density,
                            },
                            certainty=sigmoid_certainty(s.trend.best, cfg.sigmoid_a, cfg.sigmoid_n0),
                        ),
                        "trend",
                    )
                )
                if s.clear.opened_at is None:
                    s.clear.opened_at = t
                    s.clear.count = 0

        # Rolling averages over the trailing minute.
        s.recent.append((t, density, speed, flow))
        s.recent = [r for r in s.recent if r[0] > t - cfg.avg_window_seconds]
        n = len(s.recent)
        out.append(
            (
                dict(
                    kind=EventKind.CALCULATION,
                    timestamp=t,
                    location=e.location,
                    attributes={
                        "avg_density": sum(r[1] for r in s.recent) / n,
                        "avg_speed": sum(r[2] for r in s.recent) / n,
                        "avg_flow": sum(r[3] for r in s.recent) / n,
                        "count": float(n),
                    },
                ),
                "calc",
            )
        )
        return out

    def _process_queue_estimate(self, e: Event) -> list[tuple[dict, str]]:
        cfg = self.config
        s = self._ramp(e.location)
        value = float(e.attributes["queue_estimate"])
        max_queue = cfg.ramp_max_queues.get(e.location)
        out: list[tuple[dict, str]] = []
        if not s.active:
            s.active = True
            s.last_value = value
            s.run = 0
            s.best = 0
            s.last_emitted = 0
            s.episode += 1
            return out
        if value > s.last_value:
            s.run += 1
        else:
            if s.last_emitted > 0:
                s.episode += 1
                s.last_emitted = 0
            s.run = 0
            s.best = 0
        s.best = max(s.best, s.run)
        s.last_value = value
        if (
            max_queue is not None
            and s.best >= cfg.trend_min_increases
            and s.best > s.last_emitted
            and value >= cfg.overflow_queue_fraction * max_queue
        ):
            s.last_emitted = s.best
            out.append(
                (
                    dict(
                        kind=EventKind.PREDICTED_RAMP_OVERFLOW,
                        timestamp=e.timestamp,
                        location=e.location,
                        attributes={
                            "trend_length": float(s.best),
                            "episode": float(s.episode),
                            "queue_estimate": value,
                        },
                        certainty=sigmoid_certainty(s.best, cfg.sigmoid_a, cfg.sigmoid_n0),
                    ),
                    "overflow",
                )
            )
        return out

    def epn_step(self, events: Iterable[Event]) -> list[Event]:
        """Run all agents over one tick's input events, canonically ordered."""
        staged: list[tuple[dict, str]] = []
        for e in sorted(events, key=_input_sort_key):
            if e.kind is EventKind.SENSOR_READING:
                staged.extend(self._process_reading(e))
            elif e.kind is EventKind.CALCULATION and "queue_estimate" in e.attributes:
                staged.extend(self._process_queue_estimate(e))
        built = [
            (Event(id="pending", **payload), agent) for payload, agent in staged
        ]
        ordered = sorted(built, key=_output_sort_key)
        return [
            self.factory.make(
                ev.kind, ev.timestamp, ev.location, ev.attributes, ev.certainty
            )
            for ev, _ in ordered
        ]
