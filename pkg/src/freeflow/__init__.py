"""Closed-loop freeway traffic management.

A macroscopic cell-based simulator produces sensor events; an event
processing network detects and forecasts congestion with quantified
certainty; hierarchical ramp metering (integral feedback per ramp plus
event-driven coordination between neighbours) acts back on the simulator;
a metrics harness quantifies the savings; a socket gateway feeds the
operator dashboard.
"""

from .events import Event, EventKind, Topic, deserialize_event, serialize_event
from .fundamental import FundamentalDiagram, demand_fn, supply_fn
from .network import CellSpec, DemandProfile, FreewayNetwork, RampSpec
from .simulator import SimState, Simulator, run_scenario

__all__ = [
    "Event",
    "EventKind",
    "Topic",
    "serialize_event",
    "deserialize_event",
    "FundamentalDiagram",
    "demand_fn",
    "supply_fn",
    "CellSpec",
    "RampSpec",
    "DemandProfile",
    "FreewayNetwork",
    "Simulator",
    "SimState",
    "run_scenario",
]

__version__ = "0.1.0"
