"""Event-driven coordination between adjacent metered ramps.

Each ramp runs two small state machines.  The first picks the local
control mode: density control switches on when congestion is detected or
forecast at the ramp's monitored cell (with a density-threshold fallback
when events are missed) and queue control engages only while a live
coordination request from the downstream neighbour is held.  The second
decides when a ramp asks its upstream neighbour for help: either the
expected-travel-time trade-off favours acting on a forecast, congestion
is already present while control is active, or the ramp's own queue is
close to full.  While active, a request is re-sent every tick and the
desired queue lengths on both sides track the partner's occupancy so the
stored vehicles stay balanced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .events import Event, EventFactory, EventKind

GAMMA_DEFAULTS = (0.8, 0.7, 0.7, 0.8)  # activation, release, request-release, queue-fallback
CERTAINTY_THRESHOLD = 0.6
FORECAST_TTL_TICKS = 20  # forecasts go stale after 5 min without refresh
REQUEST_TTL_TICKS = 2  # queue control drops if requests stop arriving

#: Max change of a requested queue target per tick (vehicles).  The
#: saturation interval converts a target step of x vehicles into a
#: metering swing of x/tick_hours veh/h, so raw balance targets would act
#: as bang-bang control; ramping them keeps the merge flows smooth.
TARGET_RATE_LIMIT = 0.5


class DegenerateDenominator(ArithmeticError):
    """No mainline or queue headroom left downstream; congestion is binding."""


@dataclass(frozen=True)
class TradeoffInputs:
    p_event: float  # forecast certainty
    horizon: float  # hours until the forecast event
    cell_length: float  # km, bottleneck cell
    rho_c_ds: float  # veh/km, critical density downstream
    rho_ds: float  # veh/km, current density downstream
    q_bar_us: float  # vehicles, upstream ramp capacity
    q_bar_ds: float  # vehicles, downstream ramp capacity
    q_ds: float  # vehicles, downstream ramp queue
    delta_phi: float  # veh/h, bottleneck capacity drop in flow units
    t_con: float  # hours, expected congestion duration

    def __post_init__(self):
        if not (0.0 <= self.p_event <= 1.0):
            raise ValueError("p_event must lie in [0, 1]")
        for name in ("horizon", "cell_length", "q_bar_us", "q_bar_ds", "q_ds", "delta_phi", "t_con"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


def delta_t_ramp_bound(i: TradeoffInputs) -> float:
    """Worst-case extra waiting (veh*h) from coordinating unnecessarily."""
    if i.q_bar_ds + i.q_bar_us <= 0.0:
        raise ValueError("at least one ramp must have storage")
    return i.horizon * (i.q_bar_ds / (i.q_bar_ds + i.q_bar_us)) * i.q_bar_us


def delta_t_ml_bound(i: TradeoffInputs) -> float:
    """Lower bound (veh*h) on congestion time avoidable by coordinating."""
    headroom = i.cell_length * (i.rho_c_ds - i.rho_ds) + i.q_bar_ds - i.q_ds
    if headroom <= 0.0:
        raise DegenerateDenominator("downstream headroom exhausted")
    return (i.q_bar_us * i.horizon / headroom) * i.delta_phi * i.t_con


def tradeoff(i: TradeoffInputs) -> bool:
    """True when the expected congestion cost outweighs the waiting cost."""
    try:
        ml = delta_t_ml_bound(i)
    except DegenerateDenominator:
        return True
    return i.p_event * ml > (1.0 - i.p_event) * delta_t_ramp_bound(i)


def star_condition(
    to_pc: bool,
    to_pr: bool,
    congestion: bool,
    control_active: bool,
    queue: float,
    max_queue: float,
    gamma4: float,
) -> bool:
    """Activation rule for requesting upstream coordination."""
    return ((to_pc or to_pr or congestion) and control_active) or (queue >= gamma4 * max_queue)


def balanced_queue_target(own_max_queue: float, partner_max_queue: float, partner_queue: float) -> float:
    """Desired queue keeping occupancy fractions equal across a ramp pair."""
    if partner_max_queue <= 0.0:
        raise ValueError("partner ramp needs positive storage")
    return (own_max_queue / partner_max_queue) * partner_queue


@dataclass
class RampCoordinationConfig:
    ramp_index: int
    monitor_cell: int  # cell whose congestion state this ramp reacts to
    critical_density: float  # veh/km at the monitored cell
    max_queue: float
    upstream_partner: Optional[int] = None  # ramp index asked for help
    cell_length: float = 0.5
    delta_phi: float = 0.0  # veh/h capacity drop at the monitored bottleneck
    gammas: tuple[float, float, float, float] = GAMMA_DEFAULTS
    certainty_threshold: float = CERTAINTY_THRESHOLD
    horizon_hours: float = 0.25
    congestion_duration_hours: float = 1.0


@dataclass
class RampObservation:
    density: float  # veh/km at the monitored cell (estimated)
    queue: float  # vehicles on the ramp (estimated)


@dataclass
class RampCoordinationState:
    control_mode: str = "Inactive"  # Inactive | DensityControl | DensityAndQueueControl
    upstream_request_active: bool = False
    congestion_live: bool = False
    latest_pc: Optional[Event] = None
    latest_pr: Optional[Event] = None
    rc_target: Optional[float] = None
    rc_seen_tick: Optional[int] = None
    ca: bool = False
    to_pc: bool = False
    to_pr: bool = False


@dataclass
class CoordinationResult:
    events: list[Event]
    queue_targets: dict[int, Optional[float]]  # ramp -> desired queue (None = slack)
    modes: dict[int, str]


class Coordinator:
    """Single deterministic coordinator stepped once per tick."""

    def __init__(self, configs: list[RampCoordinationConfig], factory: Optional[EventFactory] = None):
        self.configs = {c.ramp_index: c for c in configs}
        self.states = {c.ramp_index: RampCoordinationState() for c in configs}
        self.factory = factory or EventFactory("coord")
        self._suppressed: dict[int, int] = {}  # operator-rejected requests (ramp -> until tick)
        self._sent_targets: dict[int, float] = {}  # requester -> last target sent upstream

    def suppress_request(self, ramp_index: int, until_tick: int) -> None:
        self._suppressed[ramp_index] = until_tick

    def _ingest(self, tick: int, events: list[Event]) -> None:
        for cfg in self.configs.values():
            s = self.states[cfg.ramp_index]
            for e in events:
                if e.kind is EventKind.CONGESTION and e.location == cfg.monitor_cell:
                    s.congestion_live = True
                elif e.kind is EventKind.CLEAR_CONGESTION and e.location == cfg.monitor_cell:
                    s.congestion_live = False
                    s.latest_pc = None
                elif e.kind is EventKind.PREDICTED_CONGESTION and e.location == cfg.monitor_cell:
                    s.latest_pc = e
                elif e.kind is EventKind.PREDICTED_RAMP_OVERFLOW and e.location == cfg.ramp_index:
                    s.latest_pr = e
                elif e.kind is EventKind.RAMP_COORDINATION and e.location == cfg.ramp_index:
                    s.rc_target = float(e.attributes.get("requested_queue_target", cfg.max_queue))
                    s.rc_seen_tick = tick
                elif e.kind is EventKind.CLEAR_RAMP_COORDINATION and e.location == cfg.ramp_index:
                    s.rc_target = None
                    s.rc_seen_tick = None

    @staticmethod
    def _fresh(event: Optional[Event], tick: int, tick_seconds: int) -> bool:
        if event is None:
            return False
        return tick * tick_seconds - event.timestamp <= FORECAST_TTL_TICKS * tick_seconds

    def _tradeoff_for(self, cfg: RampCoordinationConfig, certainty: float, obs: RampObservation) -> bool:
        inputs = TradeoffInputs(
            p_event=certainty,
            horizon=cfg.horizon_hours,
            cell_length=cfg.cell_length,
            rho_c_ds=cfg.critical_density,
            rho_ds=max(obs.density, 0.0),
            q_bar_us=self.configs[cfg.upstream_partner].max_queue if cfg.upstream_partner is not None else 0.0,
            q_bar_ds=cfg.max_queue,
            q_ds=max(obs.queue, 0.0),
            delta_phi=cfg.delta_phi,
            t_con=cfg.congestion_duration_hours,
        )
        return tradeoff(inputs)

    def step(
        self,
        tick: int,
        tick_seconds: int,
        events: list[Event],
        observations: dict[int, RampObservation],
        activation_gate=None,
    ) -> CoordinationResult:
        """Advance every ramp's state machines by one tick.

        ``activation_gate(ramp_index) -> bool`` is consulted when a ramp
        wants to start requesting coordination; returning False defers the
        activation (hybrid mode hands the decision to the operator).
        """
        self._ingest(tick, events)
        cleared_locations = {e.location for e in events if e.kind is EventKind.CLEAR_CONGESTION}
        emitted: list[Event] = []
        targets: dict[int, Optional[float]] = {}
        modes: dict[int, str] = {}
        ts = tick * tick_seconds

        for idx in sorted(self.configs):
            cfg = self.configs[idx]
            s = self.states[idx]
            obs = observations[idx]
            gamma1, gamma2, gamma3, gamma4 = cfg.gammas

            pc_live = self._fresh(s.latest_pc, tick, tick_seconds)
            pr_live = self._fresh(s.latest_pr, tick, tick_seconds)
            pc_confident = pc_live and (s.latest_pc.certainty or 0.0) >= cfg.certainty_threshold
            rc_live = s.rc_seen_tick is not None and tick - s.rc_seen_tick <= REQUEST_TTL_TICKS

            # Local control mode: which quantities the feedback law tracks.
            if rc_live:
                s.control_mode = "DensityAndQueueControl"
            else:
                if s.control_mode == "DensityAndQueueControl":
                    s.control_mode = "DensityControl"
                if s.control_mode == "Inactive":
                    if s.congestion_live or pc_confident or obs.density >= gamma1 * cfg.critical_density:
                        s.control_mode = "DensityControl"
                elif s.control_mode == "DensityControl":
                    if not s.congestion_live and not pc_confident:
                        if cfg.monitor_cell in cleared_locations or obs.density <= gamma2 * cfg.critical_density:
                            s.control_mode = "Inactive"

            s.ca = s.control_mode != "Inactive"

            # Upstream request: only meaningful with a partner to ask.
            if cfg.upstream_partner is not None:
                s.to_pc = pc_live and self._tradeoff_for(cfg, s.latest_pc.certainty or 0.0, obs)
                s.to_pr = pr_live and self._tradeoff_for(cfg, s.latest_pr.certainty or 0.0, obs)
                star = star_condition(
                    s.to_pc, s.to_pr, s.congestion_live, s.ca, obs.queue, cfg.max_queue, gamma4
                )
                suppressed = self._suppressed.get(idx, -1) >= tick
                if not s.upstream_request_active:
                    if star and not suppressed and (activation_gate is None or activation_gate(idx)):
                        s.upstream_request_active = True
                elif not star and obs.queue <= gamma3 * cfg.max_queue:
                    s.upstream_request_active = False
                    self._sent_targets.pop(idx, None)
                    emitted.append(
                        self.factory.make(
                            EventKind.CLEAR_RAMP_COORDINATION,
                            timestamp=ts,
                            location=cfg.upstream_partner,
                            attributes={"requesting_ramp": float(idx)},
                        )
                    )
                if s.upstream_request_active:
                    partner_cfg = self.configs[cfg.upstream_partner]
                    balance = balanced_queue_target(
                        partner_cfg.max_queue, cfg.max_queue, obs.queue
                    )
                    previous = self._sent_targets.get(
                        idx, observations[cfg.upstream_partner].queue
                    )
                    requested = min(
                        max(balance, previous - TARGET_RATE_LIMIT),
                        previous + TARGET_RATE_LIMIT,
                    )
                    requested = min(max(requested, 1.0), partner_cfg.max_queue)
                    self._sent_targets[idx] = requested
                    emitted.append(
                        self.factory.make(
                            EventKind.RAMP_COORDINATION,
                            timestamp=ts,
                            location=cfg.upstream_partner,
                            attributes={
                                "requested_queue_target": requested,
                                "requesting_ramp": float(idx),
                            },
                        )
                    )
            else:
                s.to_pc = False
                s.to_pr = False

        # Requests emitted this tick take effect this tick: the coordinator
        # is one logical module, the events are published for observability.
        self._ingest(tick, emitted)
        for idx in sorted(self.configs):
            cfg = self.configs[idx]
            s = self.states[idx]
            rc_live = s.rc_seen_tick is not None and tick - s.rc_seen_tick <= REQUEST_TTL_TICKS
            if rc_live:
                s.control_mode = "DensityAndQueueControl"
            elif s.control_mode == "DensityAndQueueControl":
                s.control_mode = "DensityControl"

            if s.control_mode == "DensityAndQueueControl" and s.rc_target is not None:
                targets[idx] = min(max(s.rc_target, 1.0), cfg.max_queue)
            else:
                targets[idx] = None
            modes[idx] = s.control_mode

        return CoordinationResult(events=emitted, queue_targets=targets, modes=modes)
