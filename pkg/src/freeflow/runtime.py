"""Closed-loop tick pipeline over the event bus.

Per tick, strictly in this order: the simulator publishes sensor events;
the per-ramp estimators publish density/queue estimates; the event
processing network publishes detections, forecasts, and calculations; the
coordinator consumes them and publishes coordination requests; the local
controllers publish metering commands; the simulator steps.  Operator
actions received from the gateway apply at the next tick boundary.  All
randomness flows from one seeded generator, so a run is a pure function
of (scenario, mode, seed).
"""

from __future__ import annotations

import queue
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bus import Bus
from .cep import EventProcessingNetwork
from .coordination import Coordinator, RampObservation
from .events import Event, EventFactory, EventKind, Topic
from .local_control import ControlMode, LocalController
from .scenario import ScenarioConfig
from .simulator import RunResult, SimState, StepFlows, Trajectory
from .state_estimation import RampAreaEstimator

MODES = ("none", "local", "coordinated")
MODE_CODES = {ControlMode.INACTIVE: 0.0, ControlMode.DENSITY: 1.0, ControlMode.DENSITY_AND_QUEUE: 2.0}
REJECTION_COOLDOWN_TICKS = 20

ACCEPT, MODIFY, REJECT = 1.0, 2.0, 3.0


@dataclass
class PendingAction:
    action_id: int
    ramp_index: int
    description: str


@dataclass
class Snapshot:
    """Current per-cell and per-ramp view for late-joining dashboards."""

    time_s: int
    cells: list[dict]
    ramps: list[dict]


@dataclass
class ClosedLoopRun:
    result: RunResult
    spill_total: float
    queue_conflicts: int
    modes_seen: dict[int, set[str]] = field(default_factory=dict)


class ClosedLoopRuntime:
    def __init__(
        self,
        config: ScenarioConfig,
        mode: str = "coordinated",
        bus: Optional[Bus] = None,
        hybrid: bool = False,
        on_tick: Optional[Callable[[int, Snapshot], None]] = None,
    ):
        if mode not in MODES:
            raise ValueError(f"controller mode must be one of {MODES}")
        self.config = config
        self.mode = mode
        self.hybrid = hybrid
        self.bus = bus or Bus()
        self.on_tick = on_tick
        self.operator_inbox: "queue.Queue[Event]" = queue.Queue()

        self.sim = config.build_simulator()
        self.net = self.sim.net
        self.cep = EventProcessingNetwork(config.build_cep_config())
        self.coordinator = Coordinator(
            config.build_coordination_configs(coordinated=(mode == "coordinated"))
        )
        self.controllers = config.build_local_controllers()
        self.estimators = [
            RampAreaEstimator(
                cell_length_km=self.net.cells[r.attach_cell].length,
                tick_hours=self.net.tick_hours,
                measurement_noise_density=max((config.noise_sigma * config.critical_density) ** 2, 0.01),
                measurement_noise_queue=max((config.noise_sigma * r.max_queue / 2.0) ** 2, 0.01),
            )
            for r in self.net.ramps
        ]
        self.sim_factory = EventFactory("sim")
        self.calc_factory = EventFactory("est")
        self.cmd_factory = EventFactory("ctl")
        self._action_seq = 0
        self.pending_actions: dict[int, PendingAction] = {}
        self._approved: set[int] = set()
        self.snapshot: Optional[Snapshot] = None

    # Operator interaction ----------------------------------------------

    def submit_operator_action(self, event: Event) -> None:
        """Queue an operator decision; it applies at the next tick boundary."""
        if event.kind is not EventKind.OPERATOR_ACTION:
            raise ValueError("expected an OperatorAction event")
        self.operator_inbox.put(event)

    def _next_action_id(self) -> int:
        self._action_seq += 1
        return self._action_seq

    def _apply_operator_actions(self, tick: int) -> None:
        while True:
            try:
                event = self.operator_inbox.get_nowait()
            except queue.Empty:
                return
            self.bus.publish(Topic.OPERATOR, event)
            decision = event.attributes.get("decision")
            action_id = int(event.attributes.get("action_id", -1))
            ramp = int(event.attributes.get("ramp", event.location))
            if action_id in self.pending_actions:
                pending = self.pending_actions.pop(action_id)
                if decision == ACCEPT:
                    self._approved.add(pending.ramp_index)
                elif decision == REJECT:
                    self.coordinator.suppress_request(
                        pending.ramp_index, tick + REJECTION_COOLDOWN_TICKS
                    )
                elif decision == MODIFY and "value" in event.attributes:
                    self._approved.add(pending.ramp_index)
                    if 0 <= pending.ramp_index < len(self.controllers):
                        ctl = self.controllers[pending.ramp_index]
                        ctl.min_flow = min(
                            max(float(event.attributes["value"]), 0.0), ctl.max_flow
                        )
            elif 0 <= ramp < len(self.controllers):
                # Direct overrides outside the suggestion loop.
                ctl = self.controllers[ramp]
                if "min_flow" in event.attributes:
                    ctl.min_flow = min(max(float(event.attributes["min_flow"]), 0.0), ctl.max_flow)
                if "rate_pin" in event.attributes:
                    pin = float(event.attributes["rate_pin"])
                    ctl.rate_pin = None if pin < 0 else pin

    # Tick pipeline ------------------------------------------------------

    def _estimates(
        self,
        tick: int,
        sensor_events: list[Event],
        telemetry: list[dict[str, float]],
    ) -> list[Event]:
        readings = {e.location: e for e in sensor_events}
        ts = tick * self.net.tick_seconds
        out = []
        for i, ramp in enumerate(self.net.ramps):
            cell = ramp.attach_cell
            reading = readings.get(cell)
            upstream = readings.get(cell - 1)
            split = self.net.cells[cell - 1].offramp_split if cell > 0 else 0.0
            inflow = (upstream.attributes["flow"] * (1.0 - split)) if upstream else 0.0
            inflow += telemetry[i]["last_ramp_flow"]
            outflow = reading.attributes["flow"] if reading else 0.0
            density_meas = reading.attributes["density"] if reading else 0.0
            est_rho, est_q = self.estimators[i].step(
                inflow_vph=inflow,
                outflow_vph=outflow,
                arrivals_vph=telemetry[i]["arrivals"],
                ramp_flow_vph=telemetry[i]["last_ramp_flow"],
                density_meas=density_meas,
                queue_meas=telemetry[i]["queue"],
            )
            out.append(
                self.calc_factory.make(
                    EventKind.CALCULATION,
                    timestamp=ts,
                    location=i,
                    attributes={"density_estimate": est_rho, "queue_estimate": est_q, "ramp": float(i)},
                )
            )
        return out

    def _activation_gate(self, tick: int) -> Callable[[int], bool]:
        def gate(ramp_index: int) -> bool:
            if not self.hybrid or ramp_index in self._approved:
                return True
            action_id = self._next_action_id()
            self.pending_actions[action_id] = PendingAction(
                action_id=action_id,
                ramp_index=ramp_index,
                description="activate upstream coordination",
            )
            suggestion = self.cmd_factory.make(
                EventKind.RAMP_COORDINATION,
                timestamp=tick * self.net.tick_seconds,
                location=ramp_index,
                attributes={"pending": 1.0, "action_id": float(action_id)},
            )
            self.bus.publish(Topic.COMMANDS, suggestion)
            return False

        return gate

    def _make_snapshot(self, tick: int, state: SimState, rates: np.ndarray) -> Snapshot:
        cells = []
        for k, cell in enumerate(self.net.cells):
            cells.append(
                {
                    "cell": k,
                    "density": round(float(state.densities[k]), 4),
                    "critical_density": cell.fd.critical_density,
                }
            )
        ramps = []
        for i, ramp in enumerate(self.net.ramps):
            ramps.append(
                {
                    "ramp": i,
                    "attach_cell": ramp.attach_cell,
                    "queue": round(float(state.queues[i]), 4),
                    "max_queue": ramp.max_queue,
                    "rate": round(float(rates[i]), 2),
                    "mode": self.coordinator.states[i].control_mode if i in self.coordinator.states else "Inactive",
                }
            )
        return Snapshot(time_s=tick * self.net.tick_seconds, cells=cells, ramps=ramps)

    def run(self, horizon: Optional[int] = None, seed: Optional[int] = None) -> ClosedLoopRun:
        horizon = horizon or self.config.horizon
        seed = self.config.seed if seed is None else seed
        net = self.net
        rng = np.random.default_rng(seed)
        state = self.sim.initial_state(seed, self.config.initial_densities())
        last_flows: Optional[StepFlows] = None
        conflicts = 0
        modes_seen: dict[int, set[str]] = {i: set() for i in range(net.n_ramps)}

        densities = np.zeros((horizon + 1, net.n_cells))
        queues = np.zeros((horizon + 1, net.n_ramps))
        entry = np.zeros(horizon)
        ramp_flows = np.zeros((horizon, net.n_ramps))
        arrivals = np.zeros((horizon, net.n_ramps))
        spill = np.zeros((horizon, net.n_ramps))
        total_out = np.zeros((horizon, net.n_cells))
        exit_out = np.zeros((horizon, net.n_cells))
        commands_log = np.zeros((horizon, net.n_ramps))
        densities[0] = state.densities

        for t in range(horizon):
            self._apply_operator_actions(t)

            sensor_events = self.sim.emit_sensor_events(state, last_flows, rng, self.sim_factory)
            telemetry = self.sim.ramp_telemetry(state, last_flows, rng)
            for e in sensor_events:
                self.bus.publish(Topic.SENSORS, e)

            estimate_events = self._estimates(t, sensor_events, telemetry)
            for e in estimate_events:
                self.bus.publish(Topic.DERIVED, e)

            derived = self.cep.epn_step(sensor_events + estimate_events)
            for e in derived:
                self.bus.publish(Topic.DERIVED, e)

            if self.mode == "none":
                rates = np.array([r.max_flow for r in net.ramps])
            else:
                observations = {}
                readings = {e.location: e for e in sensor_events}
                for i in range(net.n_ramps):
                    cfg = self.coordinator.configs[i]
                    if cfg.monitor_cell == net.ramps[i].attach_cell:
                        density = self.estimators[i].density_estimate
                    else:
                        reading = readings.get(cfg.monitor_cell)
                        density = reading.attributes["density"] if reading else 0.0
                    observations[i] = RampObservation(
                        density=density, queue=self.estimators[i].queue_estimate
                    )
                coordination = self.coordinator.step(
                    t,
                    net.tick_seconds,
                    derived + estimate_events,
                    observations,
                    activation_gate=self._activation_gate(t),
                )
                for e in coordination.events:
                    self.bus.publish(Topic.COMMANDS, e)

                rates = np.zeros(net.n_ramps)
                for i, ctl in enumerate(self.controllers):
                    mode_name = coordination.modes[i]
                    modes_seen[i].add(mode_name)
                    target = coordination.queue_targets[i]
                    ctl.mode = ControlMode(mode_name)
                    ctl.desired_queue = target
                    rates[i] = ctl.command(
                        density=self.estimators[i].density_estimate,
                        queue=self.estimators[i].queue_estimate,
                        measured_flow=telemetry[i]["last_ramp_flow"],
                        arrivals=telemetry[i]["arrivals"],
                    )
                    conflicts += int(ctl.queue_conflict)
                    self.bus.publish(
                        Topic.COMMANDS,
                        self.cmd_factory.make(
                            EventKind.CONTROL_COMMAND,
                            timestamp=t * net.tick_seconds,
                            location=i,
                            attributes={
                                "rate": float(rates[i]),
                                "mode": MODE_CODES[ctl.mode],
                            },
                        ),
                    )

            state, flows = self.sim.step(state, rates)

            densities[t + 1] = state.densities
            queues[t + 1] = state.queues
            entry[t] = flows.entry
            ramp_flows[t] = [flows.ramp_in[r.attach_cell] for r in net.ramps]
            arrivals[t] = flows.arrivals
            spill[t] = flows.spill
            total_out[t] = flows.total_out
            exit_out[t] = flows.exit_out
            commands_log[t] = rates
            last_flows = flows

            self.snapshot = self._make_snapshot(t + 1, state, rates)
            if self.on_tick is not None:
                self.on_tick(t, self.snapshot)

        trajectory = Trajectory(
            tick_hours=net.tick_hours,
            densities=densities,
            queues=queues,
            entry=entry,
            ramp_flows=ramp_flows,
            arrivals=arrivals,
            spill=spill,
            total_out=total_out,
            exit_out=exit_out,
            commands=commands_log,
        )
        return ClosedLoopRun(
            result=RunResult(trajectory=trajectory, events=list(self.bus.log)),
            spill_total=trajectory.total_spill,
            queue_conflicts=conflicts,
            modes_seen=modes_seen,
        )
