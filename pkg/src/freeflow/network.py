"""Static freeway topology: cells, on-/off-ramps, demand profiles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fundamental import FundamentalDiagram

#: Default sampling time: 15 s expressed in hours.
DEFAULT_TICK_HOURS = 1.0 / 240.0


@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-linear arrival demand, given as (time_s, veh/h) breakpoints."""

    times_s: tuple[float, ...]
    flows_vph: tuple[float, ...]

    def __post_init__(self):
        if len(self.times_s) != len(self.flows_vph) or not self.times_s:
            raise ValueError("need matching, non-empty breakpoint arrays")
        if any(t1 >= t2 for t1, t2 in zip(self.times_s, self.times_s[1:])):
            raise ValueError("breakpoint times must be strictly increasing")
        if any(f < 0 for f in self.flows_vph):
            raise ValueError("demand must be non-negative")

    @classmethod
    def constant(cls, flow_vph: float) -> "DemandProfile":
        return cls((0.0,), (flow_vph,))

    def at(self, time_s: float) -> float:
        return float(np.interp(time_s, self.times_s, self.flows_vph))


@dataclass(frozen=True)
class CellSpec:
    length: float  # km
    fd: FundamentalDiagram
    has_sensor: bool = True
    offramp_split: float = 0.0  # fraction exiting at the downstream node

    def __post_init__(self):
        if self.length <= 0.0:
            raise ValueError("cell length must be positive")
        if not (0.0 <= self.offramp_split < 1.0):
            raise ValueError("offramp split must lie in [0, 1)")


@dataclass(frozen=True)
class RampSpec:
    attach_cell: int
    max_queue: float  # vehicles
    max_flow: float  # veh/h
    min_flow: float = 0.0  # veh/h
    demand_profile: DemandProfile = field(default_factory=lambda: DemandProfile.constant(0.0))

    def __post_init__(self):
        if not (0.0 <= self.min_flow <= self.max_flow):
            raise ValueError("need 0 <= min_flow <= max_flow")
        if self.max_queue <= 0.0:
            raise ValueError("max_queue must be positive")


@dataclass(frozen=True)
class FreewayNetwork:
    cells: tuple[CellSpec, ...]
    ramps: tuple[RampSpec, ...]
    tick_hours: float = DEFAULT_TICK_HOURS

    def __post_init__(self):
        if not self.cells:
            raise ValueError("network needs at least one cell")
        if self.tick_hours <= 0.0:
            raise ValueError("tick must be positive")
        seen = set()
        for ramp in self.ramps:
            if not (0 <= ramp.attach_cell < len(self.cells)):
                raise ValueError(f"ramp attaches to unknown cell {ramp.attach_cell}")
            if ramp.attach_cell in seen:
                raise ValueError(f"cell {ramp.attach_cell} has more than one on-ramp")
            seen.add(ramp.attach_cell)
        for cell in self.cells:
            # CFL condition: vehicles must not cross a full cell in one tick.
            if cell.fd.free_flow_speed * self.tick_hours > cell.length + 1e-12:
                raise ValueError(
                    f"tick too large for cell of length {cell.length} km at "
                    f"{cell.fd.free_flow_speed} km/h"
                )

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_ramps(self) -> int:
        return len(self.ramps)

    @property
    def tick_seconds(self) -> int:
        return int(round(self.tick_hours * 3600.0))

    def ramp_index_at_cell(self, cell: int) -> int | None:
        for i, ramp in enumerate(self.ramps):
            if ramp.attach_cell == cell:
                return i
        return None

    def sensor_cells(self) -> list[int]:
        return [k for k, c in enumerate(self.cells) if c.has_sensor]


def uniform_network(
    n_cells: int,
    fd: FundamentalDiagram,
    cell_length: float = 0.5,
    ramps: Sequence[RampSpec] = (),
    offramp_splits: dict[int, float] | None = None,
    tick_hours: float = DEFAULT_TICK_HOURS,
) -> FreewayNetwork:
    """Homogeneous mainline with optional per-cell off-ramp splits."""
    splits = offramp_splits or {}
    cells = tuple(
        CellSpec(length=cell_length, fd=fd, has_sensor=True, offramp_split=splits.get(k, 0.0))
        for k in range(n_cells)
    )
    return FreewayNetwork(cells=cells, ramps=tuple(ramps), tick_hours=tick_hours)
