"""Discrete-time macroscopic freeway simulator.

Cell densities evolve by conservation: each tick the density of cell k
changes by (T / L_k) * (inflow_k - outflow_k), with inter-cell flow the
minimum of upstream sending flow and downstream receiving flow.  On-ramps
hold bounded queues and discharge through a metering command; off-ramps
divert a fixed split of each cell's outflow (FIFO, so a starved boundary
also starves the exit).

Two merge rules are provided.  ``proportional`` splits scarce receiving
capacity between mainline and ramp in proportion to their demands and
never admits more than the receiving flow, so densities cannot exceed the
critical density from inflow alone.  ``ramp_priority`` lets the released
ramp vehicles force their way in on top of the mainline allocation, which
is what pushes a merge cell past criticality and engages the capacity
drop.  Simulations of bottleneck breakdown use ``ramp_priority``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .events import Event, EventFactory, EventKind
from .fundamental import demand_fn, equilibrium_speed, supply_fn
from .network import DemandProfile, FreewayNetwork


class CommandOutOfRange(ValueError):
    """Metering command outside the ramp's [0, max_flow] interval."""


@dataclass(frozen=True)
class SimState:
    densities: np.ndarray  # veh/km, one per cell
    queues: np.ndarray  # vehicles, one per ramp
    time: int  # tick index
    rng_seed: int
    source_backlog: float = 0.0  # vehicles not yet admitted at the entry

    def copy(self) -> "SimState":
        return replace(self, densities=self.densities.copy(), queues=self.queues.copy())


@dataclass(frozen=True)
class StepFlows:
    """Realized flows (veh/h) for one tick, for sensing and accounting."""

    entry: float
    main_in: np.ndarray  # mainline flow received at each cell's upstream edge
    ramp_in: np.ndarray  # ramp flow merged into each ramp's attach cell
    total_out: np.ndarray  # through + exit flow leaving each cell
    exit_out: np.ndarray  # off-ramp share of total_out
    arrivals: np.ndarray  # gross ramp arrival demand
    spill: np.ndarray  # arrivals turned away at full queues (veh/h)


@dataclass
class Trajectory:
    """Full state/flow history of one run."""

    tick_hours: float
    densities: np.ndarray  # (H+1, n_cells)
    queues: np.ndarray  # (H+1, n_ramps)
    entry: np.ndarray  # (H,)
    ramp_flows: np.ndarray  # (H, n_ramps)
    arrivals: np.ndarray  # (H, n_ramps)
    spill: np.ndarray  # (H, n_ramps)
    total_out: np.ndarray  # (H, n_cells)
    exit_out: np.ndarray  # (H, n_cells)
    commands: np.ndarray  # (H, n_ramps)

    @property
    def horizon(self) -> int:
        return self.entry.shape[0]

    @property
    def total_spill(self) -> float:
        return float(self.spill.sum() * self.tick_hours)


@dataclass
class RunResult:
    trajectory: Trajectory
    events: list[Event] = field(default_factory=list)


MergeRule = str  # "proportional" | "ramp_priority"


class Simulator:
    def __init__(
        self,
        net: FreewayNetwork,
        source_demand: DemandProfile,
        nonmonotonic: bool = False,
        merge_rule: MergeRule = "proportional",
        noise_sigma: float = 0.0,
        sensor_resolution: float = 0.0,
    ):
        if merge_rule not in ("proportional", "ramp_priority"):
            raise ValueError(f"unknown merge rule: {merge_rule}")
        if noise_sigma < 0.0:
            raise ValueError("noise sigma must be non-negative")
        self.net = net
        self.source_demand = source_demand
        self.nonmonotonic = nonmonotonic
        self.merge_rule = merge_rule
        self.noise_sigma = noise_sigma
        self.sensor_resolution = sensor_resolution
        self._ramp_at_cell = {r.attach_cell: i for i, r in enumerate(net.ramps)}

    def initial_state(self, seed: int, densities: Optional[Sequence[float]] = None) -> SimState:
        rho = np.zeros(self.net.n_cells) if densities is None else np.asarray(densities, dtype=float)
        if rho.shape != (self.net.n_cells,):
            raise ValueError("initial densities must match the cell count")
        return SimState(
            densities=rho.copy(),
            queues=np.zeros(self.net.n_ramps),
            time=0,
            rng_seed=seed,
        )

    def compute_flows(self, state: SimState, commands: np.ndarray) -> StepFlows:
        net = self.net
        T = net.tick_hours
        n = net.n_cells
        rho = state.densities

        for i, ramp in enumerate(net.ramps):
            if not (-1e-9 <= commands[i] <= ramp.max_flow + 1e-9):
                raise CommandOutOfRange(
                    f"ramp {i}: command {commands[i]} outside [0, {ramp.max_flow}]"
                )

        t_s = state.time * net.tick_seconds
        demand = np.array(
            [demand_fn(c.fd, rho[k], self.nonmonotonic) for k, c in enumerate(net.cells)]
        )
        supply = np.array([supply_fn(c.fd, rho[k]) for k, c in enumerate(net.cells)])
        splits = np.array([c.offramp_split for c in net.cells])

        arrivals = np.array([r.demand_profile.at(t_s) for r in net.ramps])
        # Queue content plus fresh arrivals bound what a ramp can release.
        releasable = state.queues / T + arrivals
        ramp_demand = np.minimum(np.maximum(commands, 0.0), releasable)

        main_in = np.zeros(n)
        ramp_in = np.zeros(n)
        total_out = np.zeros(n)
        exit_out = np.zeros(n)

        # March downstream: the mainline demand offered at each boundary is
        # the (1 - split) share of the upstream cell's sending flow.
        src = self.source_demand.at(t_s) + state.source_backlog / T
        offered = src  # flow asking to enter cell k on the mainline
        upstream_total = None  # total outflow of cell k-1 implied by the merge
        for k in range(n):
            ramp_idx = self._ramp_at_cell.get(k)
            r = ramp_demand[ramp_idx] if ramp_idx is not None else 0.0
            if ramp_idx is None:
                admitted = min(offered, supply[k])
            elif self.merge_rule == "proportional":
                total = offered + r
                if total <= supply[k] or total <= 1e-12:
                    admitted = offered
                else:
                    scale = supply[k] / total
                    admitted = offered * scale
                    r *= scale
            else:  # ramp_priority: released ramp vehicles always merge
                admitted = min(offered, supply[k])
            main_in[k] = admitted
            if ramp_idx is not None:
                ramp_in[k] = r
            if k == 0:
                entry = admitted
            else:
                # FIFO: scaling the through flow scales the exit flow too.
                share = 1.0 - splits[k - 1]
                total_out[k - 1] = admitted / share
                exit_out[k - 1] = total_out[k - 1] * splits[k - 1]
            offered = (1.0 - splits[k]) * demand[k]

        # Last cell discharges freely.
        total_out[n - 1] = demand[n - 1]
        exit_out[n - 1] = total_out[n - 1] * splits[n - 1]

        ramp_flows = np.array([ramp_in[r.attach_cell] for r in net.ramps])
        spill = np.zeros(net.n_ramps)
        for i, ramp in enumerate(net.ramps):
            q_next = state.queues[i] + T * (arrivals[i] - ramp_flows[i])
            if q_next > ramp.max_queue:
                spill[i] = (q_next - ramp.max_queue) / T

        return StepFlows(
            entry=entry,
            main_in=main_in,
            ramp_in=ramp_in,
            total_out=total_out,
            exit_out=exit_out,
            arrivals=arrivals,
            spill=spill,
        )

    def step(self, state: SimState, commands: Sequence[float]) -> tuple[SimState, StepFlows]:
        net = self.net
        T = net.tick_hours
        commands = np.asarray(commands, dtype=float)
        if commands.shape != (net.n_ramps,):
            raise CommandOutOfRange("one command per ramp required")
        flows = self.compute_flows(state, commands)

        lengths = np.array([c.length for c in net.cells])
        rho = state.densities + (T / lengths) * (flows.main_in + flows.ramp_in - flows.total_out)
        rho = np.maximum(rho, 0.0)

        queues = state.queues.copy()
        for i, ramp in enumerate(net.ramps):
            q = queues[i] + T * (flows.arrivals[i] - flows.ramp_in[ramp.attach_cell])
            queues[i] = min(max(q, 0.0), ramp.max_queue)

        t_s = state.time * net.tick_seconds
        src_demand = self.source_demand.at(t_s)
        backlog = max(state.source_backlog + T * (src_demand - flows.entry), 0.0)

        new_state = SimState(
            densities=rho,
            queues=queues,
            time=state.time + 1,
            rng_seed=state.rng_seed,
            source_backlog=backlog,
        )
        return new_state, flows

    def emit_sensor_events(
        self,
        state: SimState,
        flows: Optional[StepFlows],
        rng: np.random.Generator,
        factory: EventFactory,
    ) -> list[Event]:
        """One reading per sensor-equipped cell for the current tick.

        Speed is flow/density (free-flow speed on an empty cell); density
        and speed get multiplicative Gaussian noise truncated at zero and
        are optionally rounded to the sensor resolution.
        """
        net = self.net
        ts = state.time * net.tick_seconds
        out: list[Event] = []
        for k in net.sensor_cells():
            fd = net.cells[k].fd
            rho = float(state.densities[k])
            if flows is not None:
                flow = float(flows.total_out[k])
            else:  # first tick: no measured interval yet, report equilibrium
                flow = rho * equilibrium_speed(fd, rho)
            speed = fd.free_flow_speed if rho < 1e-6 else flow / rho
            if self.noise_sigma > 0.0:
                rho_obs = max(rho * (1.0 + self.noise_sigma * rng.standard_normal()), 0.0)
                speed_obs = max(speed * (1.0 + self.noise_sigma * rng.standard_normal()), 0.0)
            else:
                rho_obs, speed_obs = rho, speed
            if self.sensor_resolution > 0.0:
                res = self.sensor_resolution
                rho_obs = round(rho_obs / res) * res
                speed_obs = round(speed_obs / res) * res
            occupancy = min(rho_obs / fd.jam_density * 100.0, 100.0)
            out.append(
                factory.make(
                    EventKind.SENSOR_READING,
                    timestamp=ts,
                    location=k,
                    attributes={
                        "density": rho_obs,
                        "speed": speed_obs,
                        "flow": rho_obs * speed_obs,
                        "occupancy": occupancy,
                    },
                )
            )
        return out

    def ramp_telemetry(
        self,
        state: SimState,
        last_flows: Optional[StepFlows],
        rng: np.random.Generator,
    ) -> list[dict[str, float]]:
        """Per-ramp local measurements handed to that ramp's controller.

        Queues and arrivals are noisy; the flow released through the meter
        during the previous tick is counted exactly.
        """
        net = self.net
        t_s = state.time * net.tick_seconds
        out = []
        for i, ramp in enumerate(net.ramps):
            q = float(state.queues[i])
            arr = ramp.demand_profile.at(t_s)
            if self.noise_sigma > 0.0:
                q = max(q * (1.0 + self.noise_sigma * rng.standard_normal()), 0.0)
                arr = max(arr * (1.0 + self.noise_sigma * rng.standard_normal()), 0.0)
            last_flow = float(last_flows.ramp_in[ramp.attach_cell]) if last_flows is not None else 0.0
            out.append({"queue": q, "arrivals": arr, "last_ramp_flow": last_flow})
        return out


ControllerFn = Callable[[int, list[Event], list[dict[str, float]], SimState], Sequence[float]]


def unmetered_controller(net: FreewayNetwork) -> ControllerFn:
    rates = [r.max_flow for r in net.ramps]

    def controller(tick, sensor_events, telemetry, state):
        return rates

    return controller


def run_scenario(
    sim: Simulator,
    controller: ControllerFn,
    horizon: int,
    seed: int,
    initial_densities: Optional[Sequence[float]] = None,
) -> RunResult:
    """Step the closed loop: sense -> decide -> act, recording everything.

    Bit-identical across repeated calls with the same arguments: the only
    randomness is the sensor-noise generator seeded here.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    net = sim.net
    rng = np.random.default_rng(seed)
    factory = EventFactory("sim")
    state = sim.initial_state(seed, initial_densities)

    densities = np.zeros((horizon + 1, net.n_cells))
    queues = np.zeros((horizon + 1, net.n_ramps))
    entry = np.zeros(horizon)
    ramp_flows = np.zeros((horizon, net.n_ramps))
    arrivals = np.zeros((horizon, net.n_ramps))
    spill = np.zeros((horizon, net.n_ramps))
    total_out = np.zeros((horizon, net.n_cells))
    exit_out = np.zeros((horizon, net.n_cells))
    commands_log = np.zeros((horizon, net.n_ramps))
    events: list[Event] = []

    densities[0] = state.densities
    queues[0] = state.queues
    last_flows: Optional[StepFlows] = None

    for t in range(horizon):
        sensor_events = sim.emit_sensor_events(state, last_flows, rng, factory)
        telemetry = sim.ramp_telemetry(state, last_flows, rng)
        events.extend(sensor_events)
        commands = np.asarray(controller(t, sensor_events, telemetry, state), dtype=float)
        state, flows = sim.step(state, commands)

        densities[t + 1] = state.densities
        queues[t + 1] = state.queues
        entry[t] = flows.entry
        ramp_flows[t] = [flows.ramp_in[r.attach_cell] for r in net.ramps]
        arrivals[t] = flows.arrivals
        spill[t] = flows.spill
        total_out[t] = flows.total_out
        exit_out[t] = flows.exit_out
        commands_log[t] = commands
        last_flows = flows

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
    return RunResult(trajectory=trajectory, events=events)
