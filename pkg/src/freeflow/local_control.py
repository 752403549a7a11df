"""Per-ramp integral feedback metering with queue-aware saturation.

The ideal rate follows the integral law
``rate = measured_flow_last_tick + gain * (target_density - density)``
and is then clamped into the interval whose lower end prevents the queue
from spilling past its capacity and whose upper end keeps the queue from
draining below the desired queue length requested by coordination.  When
the two bounds cross, overflow prevention wins and the event is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

DEFAULT_GAIN = 20.0  # veh/h per veh/km
EWMA_ALPHA = 0.3


class ControlMode(str, Enum):
    INACTIVE = "Inactive"
    DENSITY = "DensityControl"
    DENSITY_AND_QUEUE = "DensityAndQueueControl"


def alinea_ideal_rate(last_flow: float, gain: float, target_density: float, density: float) -> float:
    """Unsaturated integral-feedback metering rate (veh/h)."""
    return last_flow + gain * (target_density - density)


def saturate_rate(
    ideal: float,
    min_flow: float,
    max_flow: float,
    queue: float,
    max_queue: float,
    desired_queue: float,
    demand_pred: float,
    dt_hours: float,
) -> tuple[float, bool]:
    """Clamp the ideal rate into the feasible queue-safe interval.

    Returns (rate, conflict).  The lower bound releases enough to keep the
    queue under its physical capacity; the upper bound holds back enough
    to build the queue up to the desired length.  An infeasible interval
    resolves to the lower bound (overflow prevention dominates), capped at
    the physical maximum flow, and raises the conflict flag.
    """
    if dt_hours <= 0.0:
        raise ValueError("dt must be positive")
    lower = max(min_flow, (queue - max_queue) / dt_hours + demand_pred)
    upper = min(max_flow, (queue - desired_queue) / dt_hours + demand_pred)
    if lower > upper:
        return min(lower, max_flow), True
    return min(max(ideal, lower), upper), False


def predict_demand(history: Iterable[float], alpha: float = EWMA_ALPHA) -> float:
    """Exponentially weighted moving average of measured arrivals."""
    est: Optional[float] = None
    for x in history:
        est = x if est is None else alpha * x + (1.0 - alpha) * est
    if est is None:
        raise ValueError("demand prediction needs at least one sample")
    return est


@dataclass
class LocalController:
    """Metering controller for one on-ramp."""

    target_density: float  # veh/km, the critical density of the metered cell
    min_flow: float
    max_flow: float
    max_queue: float
    dt_hours: float = 1.0 / 240.0
    gain: float = DEFAULT_GAIN
    queue_safety_margin: float = 0.0  # vehicles added to the overflow bound
    mode: ControlMode = ControlMode.INACTIVE
    desired_queue: Optional[float] = None  # None means slack (= max_queue)
    rate_pin: Optional[float] = None  # operator-pinned rate
    last_ramp_flow: float = 0.0
    demand_estimate: Optional[float] = None
    queue_conflict: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.gain <= 0.0:
            raise ValueError("gain must be positive")

    def set_mode(self, mode: ControlMode, desired_queue: Optional[float] = None) -> None:
        if mode is ControlMode.DENSITY_AND_QUEUE:
            if desired_queue is None or not (0.0 < desired_queue <= self.max_queue):
                raise ValueError("queue control requires a desired queue in (0, max_queue]")
            self.desired_queue = desired_queue
        self.mode = mode
        if mode is not ControlMode.DENSITY_AND_QUEUE and desired_queue is not None:
            self.desired_queue = desired_queue

    def observe_arrivals(self, arrivals: float) -> float:
        if self.demand_estimate is None:
            self.demand_estimate = arrivals
        else:
            self.demand_estimate = EWMA_ALPHA * arrivals + (1.0 - EWMA_ALPHA) * self.demand_estimate
        return self.demand_estimate

    def command(self, density: float, queue: float, measured_flow: float, arrivals: float) -> float:
        """Metering rate for this tick from the current estimates."""
        self.last_ramp_flow = measured_flow
        demand_pred = self.observe_arrivals(arrivals)
        self.queue_conflict = False

        if self.rate_pin is not None:
            return min(max(self.rate_pin, 0.0), self.max_flow)
        if self.mode is ControlMode.INACTIVE:
            return self.max_flow

        ideal = alinea_ideal_rate(measured_flow, self.gain, self.target_density, density)
        # Slack target 0: no queue is deliberately built, the upper bound
        # degenerates to the physical release limit queue/dt + arrivals.
        desired = self.desired_queue if self.desired_queue is not None else 0.0
        # Noisy queue estimates make the overflow bound optimistic; the
        # margin biases it toward releasing early rather than spilling.
        rate, conflict = saturate_rate(
            ideal,
            self.min_flow,
            self.max_flow,
            queue + self.queue_safety_margin,
            self.max_queue,
            desired,
            demand_pred,
            dt_hours=self.dt_hours,
        )
        self.queue_conflict = conflict
        return rate
