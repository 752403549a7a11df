"""Run evaluation: travel-time totals, savings, and detection quality."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .events import Event, EventKind
from .network import FreewayNetwork
from .simulator import Trajectory

#: A detection counts toward an episode from this long before its start.
MATCH_PREROLL_SECONDS = 300


class DivisionDegenerate(ZeroDivisionError):
    """No congestion delay to save: baseline equals free-flow time."""


@dataclass(frozen=True)
class AnnotatedEpisode:
    location: int
    start: int  # seconds
    end: int  # seconds

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError("episode must have start < end")


@dataclass
class MetricsReport:
    tts: float  # veh*h
    tft: float  # veh*h
    relative_savings_total: Optional[float] = None
    relative_savings_delay: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    mean_lead_time_min: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def compute_tts(trajectory: Trajectory, net: FreewayNetwork) -> float:
    """Total time spent: vehicle-hours accumulated on cells and queues."""
    T = trajectory.tick_hours
    lengths = np.array([c.length for c in net.cells])
    mainline = trajectory.densities[:-1] @ lengths
    queued = trajectory.queues[:-1].sum(axis=1) if net.n_ramps else np.zeros_like(mainline)
    return float(T * (mainline + queued).sum())


def free_flow_route_time(net: FreewayNetwork, entry_cell: int) -> float:
    """Expected hours to leave the network entering at ``entry_cell``,
    travelling at free-flow speed, with off-ramp attrition."""
    survival = 1.0
    total = 0.0
    for k in range(entry_cell, net.n_cells):
        cell = net.cells[k]
        total += survival * cell.length / cell.fd.free_flow_speed
        survival *= 1.0 - cell.offramp_split
    return total


def compute_tft(trajectory: Trajectory, net: FreewayNetwork) -> float:
    """Total free-flow time of every vehicle that actually entered."""
    T = trajectory.tick_hours
    total = float(trajectory.entry.sum() * T * free_flow_route_time(net, 0))
    for i, ramp in enumerate(net.ramps):
        entered = (trajectory.arrivals[:, i] - trajectory.spill[:, i]).clip(min=0.0)
        total += float(entered.sum() * T * free_flow_route_time(net, ramp.attach_cell))
    return total


def relative_savings(tts_baseline: float, tts_controlled: float, tft: float) -> tuple[float, float]:
    """(total, delay-only) fractional savings of controlled vs baseline."""
    if tts_baseline <= 0.0:
        raise DivisionDegenerate("baseline has no travel time")
    total = (tts_baseline - tts_controlled) / tts_baseline
    if tts_baseline <= tft:
        raise DivisionDegenerate("baseline is already free-flowing; no delay to save")
    delay = (tts_baseline - tts_controlled) / (tts_baseline - tft)
    return total, delay


@dataclass
class DetectionQuality:
    precision: float
    recall: float
    lead_times_s: list[float]
    true_positives: int
    false_positives: int
    matched_episodes: int
    total_episodes: int

    @property
    def mean_lead_time_min(self) -> Optional[float]:
        if not self.lead_times_s:
            return None
        return float(np.mean(self.lead_times_s)) / 60.0


def precision_recall(
    events: Iterable[Event],
    annotations: Sequence[AnnotatedEpisode],
    certainty_threshold: float = 0.6,
    kinds: tuple[EventKind, ...] = (EventKind.CONGESTION,),
) -> DetectionQuality:
    """Match emissions against annotated episodes.

    An emission matches an episode at the same location whose
    [start - 5 min, end] window contains its timestamp.  Forecast kinds
    below the certainty threshold are ignored.  Lead times are episode
    start minus emission time for matched emissions.
    """
    candidates = [
        e
        for e in events
        if e.kind in kinds and (e.certainty is None or e.certainty >= certainty_threshold)
    ]
    by_location: dict[int, list[AnnotatedEpisode]] = {}
    for ann in annotations:
        by_location.setdefault(ann.location, []).append(ann)

    tp = 0
    fp = 0
    lead_times: list[float] = []
    matched: set[AnnotatedEpisode] = set()
    for e in candidates:
        hits = [
            ann
            for ann in by_location.get(e.location, [])
            if ann.start - MATCH_PREROLL_SECONDS <= e.timestamp <= ann.end
        ]
        if hits:
            tp += 1
            for ann in hits:
                matched.add(ann)
            lead_times.append(min(ann.start for ann in hits) - e.timestamp)
        else:
            fp += 1

    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = len(matched) / len(annotations) if annotations else 1.0
    return DetectionQuality(
        precision=precision,
        recall=recall,
        lead_times_s=lead_times,
        true_positives=tp,
        false_positives=fp,
        matched_episodes=len(matched),
        total_episodes=len(annotations),
    )


def forecast_anticipation(
    events: Sequence[Event],
    certainty_threshold: float = 0.6,
    min_lead_s: int = 180,
    max_lead_s: int = 900,
) -> tuple[int, int]:
    """How many Congestion emissions had a timely confident forecast.

    Returns (anticipated, total): a detection counts as anticipated when a
    PredictedCongestion at its location, at or above the threshold, was
    emitted between ``min_lead_s`` and ``max_lead_s`` beforehand.
    """
    detections = [e for e in events if e.kind is EventKind.CONGESTION]
    forecasts = [
        e
        for e in events
        if e.kind is EventKind.PREDICTED_CONGESTION and (e.certainty or 0.0) >= certainty_threshold
    ]
    anticipated = 0
    for det in detections:
        for fc in forecasts:
            if fc.location == det.location and min_lead_s <= det.timestamp - fc.timestamp <= max_lead_s:
                anticipated += 1
                break
    return anticipated, len(detections)


def load_annotations(path: str | Path) -> list[AnnotatedEpisode]:
    episodes = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            episodes.append(
                AnnotatedEpisode(
                    location=int(row["location"]),
                    start=int(float(row["start"])),
                    end=int(float(row["end"])),
                )
            )
    return episodes


def write_annotations(path: str | Path, episodes: Sequence[AnnotatedEpisode]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location", "start", "end"])
        for ep in episodes:
            writer.writerow([ep.location, ep.start, ep.end])
