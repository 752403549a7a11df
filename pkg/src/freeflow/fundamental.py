"""Flow-density relationships: the piecewise-affine fundamental diagram.

The diagram is triangular: flow rises at the free-flow speed up to the
critical density, where it reaches capacity, and the admissible receiving
flow falls linearly to zero at the jam density.  In the non-monotonic
variant the sending flow of an over-critical cell degrades linearly, down
to ``(1 - capacity_drop) * capacity`` at jam, which is what makes a broken
-down bottleneck discharge below capacity.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class FundamentalDiagram:
    critical_density: float  # veh/km
    jam_density: float  # veh/km
    capacity: float  # veh/h
    free_flow_speed: float  # km/h
    capacity_drop: float = 0.0  # fraction of capacity lost past criticality

    def __post_init__(self):
        if not (0.0 < self.critical_density < self.jam_density):
            raise ValueError("need 0 < critical_density < jam_density")
        if self.capacity <= 0.0:
            raise ValueError("capacity must be positive")
        if abs(self.capacity - self.free_flow_speed * self.critical_density) > 1e-6 * self.capacity:
            raise ValueError("capacity must equal free_flow_speed * critical_density")
        if not (0.0 <= self.capacity_drop < 1.0):
            raise ValueError("capacity_drop must lie in [0, 1)")

    @classmethod
    def triangular(
        cls,
        free_flow_speed: float,
        critical_density: float,
        jam_density: float,
        capacity_drop: float = 0.0,
    ) -> "FundamentalDiagram":
        return cls(
            critical_density=critical_density,
            jam_density=jam_density,
            capacity=free_flow_speed * critical_density,
            free_flow_speed=free_flow_speed,
            capacity_drop=capacity_drop,
        )

    @property
    def congestion_wave_speed(self) -> float:
        """Backward wave speed (km/h) implied by the receiving branch."""
        return self.capacity / (self.jam_density - self.critical_density)


def demand_fn(fd: FundamentalDiagram, rho_us: float, nonmonotonic: bool = False) -> float:
    """Sending flow of a cell at upstream density ``rho_us`` (veh/h).

    Monotonic mode saturates at capacity; non-monotonic mode decays
    linearly past the critical density, reaching (1 - drop) * capacity at
    jam and staying there beyond.
    """
    if rho_us < 0.0:
        raise ValueError("density must be non-negative")
    if rho_us <= fd.critical_density:
        return fd.free_flow_speed * rho_us
    if not nonmonotonic or fd.capacity_drop == 0.0:
        return fd.capacity
    span = fd.jam_density - fd.critical_density
    excess = min(rho_us - fd.critical_density, span)
    return fd.capacity * (1.0 - fd.capacity_drop * excess / span)


def supply_fn(fd: FundamentalDiagram, rho_ds: float) -> float:
    """Receiving flow of a cell at downstream density ``rho_ds`` (veh/h)."""
    if rho_ds < 0.0:
        raise ValueError("density must be non-negative")
    if rho_ds <= fd.critical_density:
        return fd.capacity
    if rho_ds >= fd.jam_density:
        return 0.0
    return fd.capacity * (fd.jam_density - rho_ds) / (fd.jam_density - fd.critical_density)


def equilibrium_speed(fd: FundamentalDiagram, rho: float) -> float:
    """Speed (km/h) at density ``rho`` implied by the monotonic diagram."""
    if rho <= 1e-9:
        return fd.free_flow_speed
    return min(demand_fn(fd, rho), supply_fn(fd, rho)) / rho
