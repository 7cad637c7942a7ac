"""Loop-route geometry: corridor mile markers and cyclic route progression.

The roadway model is one-dimensional arc length per lane. A vehicle lives on a
:class:`LoopRoute`, a closed driving cycle made of a westbound mainline leg, a
turnaround connector, the eastbound return leg, and a second turnaround back to
the start. Westbound travel decreases the mile marker.

Distances are statute miles unless a name says otherwise; speeds are m/s.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

METERS_PER_MILE = 1609.344
FEET_PER_MILE = 5280.0
MPS_PER_MPH = 0.44704


class Heading(str, Enum):
    WESTBOUND = "westbound"
    EASTBOUND = "eastbound"
    TURNAROUND = "turnaround"


@dataclass(frozen=True)
class Corridor:
    """Instrumented freeway segment addressed by mile marker.

    Attributes
    ----------
    length_mi : float
        total corridor length (default: 5.0)
    lane_count : int
        mainline lanes per direction (default: 4)
    controlled_lanes : int
        lanes in which controlled vehicles operate (default: 3)
    testbed_start_mm, testbed_end_mm : float
        mile-marker bounds of the experimental testbed
    """

    length_mi: float = 5.0
    lane_count: int = 4
    controlled_lanes: int = 3
    testbed_start_mm: float = 0.0
    testbed_end_mm: float = 5.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.testbed_start_mm < self.testbed_end_mm <= self.length_mi:
            raise ValueError(
                f"testbed bounds [{self.testbed_start_mm}, {self.testbed_end_mm}] "
                f"must satisfy 0 <= start < end <= length ({self.length_mi})"
            )
        if not 1 <= self.controlled_lanes <= self.lane_count:
            raise ValueError(
                f"controlled_lanes={self.controlled_lanes} outside [1, {self.lane_count}]"
            )


@dataclass(frozen=True)
class LoopRoute:
    """Closed driving cycle over the corridor.

    The cycle is four segments, in arc order: westbound leg (entry marker down
    to exit marker), turnaround at the west end, eastbound return leg, and the
    turnaround at the east end. While turning around the mile marker holds at
    the junction value, which keeps the marker continuous across segment
    boundaries and inside corridor bounds.

    Attributes
    ----------
    route_id : str
        identifier referenced by scenario fleet entries
    westbound_entry_mm : float
        marker where the westbound leg begins (the higher marker)
    westbound_exit_mm : float
        marker where vehicles leave the leg to turn around
    turnaround_length_mi : float
        driven length of each connector
    turnaround_speed_mps : float
        speed limit on the connectors
    """

    route_id: str
    westbound_entry_mm: float
    westbound_exit_mm: float
    turnaround_length_mi: float
    turnaround_speed_mps: float = 15.0

    def __post_init__(self) -> None:
        if self.westbound_entry_mm <= self.westbound_exit_mm:
            raise ValueError(
                f"route {self.route_id}: westbound entry marker "
                f"({self.westbound_entry_mm}) must exceed exit marker "
                f"({self.westbound_exit_mm})"
            )
        if self.turnaround_length_mi <= 0:
            raise ValueError(f"route {self.route_id}: turnaround length must be > 0")
        if self.turnaround_speed_mps <= 0:
            raise ValueError(f"route {self.route_id}: turnaround speed must be > 0")

    @property
    def leg_mi(self) -> float:
        """Driven length of one mainline leg."""
        return self.westbound_entry_mm - self.westbound_exit_mm

    @property
    def total_cycle_mi(self) -> float:
        return 2.0 * self.leg_mi + 2.0 * self.turnaround_length_mi

    def validate_within(self, corridor: Corridor) -> None:
        if not (0.0 <= self.westbound_exit_mm and self.westbound_entry_mm <= corridor.length_mi):
            raise ValueError(
                f"route {self.route_id}: leg [{self.westbound_exit_mm}, "
                f"{self.westbound_entry_mm}] outside corridor [0, {corridor.length_mi}]"
            )

    def locate(self, arc_s: float) -> tuple[float, Heading]:
        """Mile marker and heading at arc position ``arc_s`` (wrapped)."""
        a = arc_s % self.total_cycle_mi
        leg, ta = self.leg_mi, self.turnaround_length_mi
        if a < leg:
            return self.westbound_entry_mm - a, Heading.WESTBOUND
        if a < leg + ta:
            return self.westbound_exit_mm, Heading.TURNAROUND
        if a < 2.0 * leg + ta:
            return self.westbound_exit_mm + (a - leg - ta), Heading.EASTBOUND
        return self.westbound_entry_mm, Heading.TURNAROUND


@dataclass(frozen=True)
class RoutePosition:
    """Position on a route: arc length along the cycle plus the assigned lane.

    ``lane`` is the mainline lane (1-based). The lane a vehicle reports over
    the wire is 0 while turning around, marking it off the mainline.
    """

    route: LoopRoute
    arc_s: float
    lane: int

    def __post_init__(self) -> None:
        if self.lane < 1:
            raise ValueError(f"lane must be >= 1, got {self.lane}")
        wrapped = self.arc_s % self.route.total_cycle_mi
        object.__setattr__(self, "arc_s", wrapped)

    @property
    def route_id(self) -> str:
        return self.route.route_id

    @property
    def mile_marker(self) -> float:
        return self.route.locate(self.arc_s)[0]

    @property
    def heading(self) -> Heading:
        return self.route.locate(self.arc_s)[1]

    @property
    def reported_lane(self) -> int:
        """Lane as carried in telemetry: 0 when off the mainline."""
        return 0 if self.heading is Heading.TURNAROUND else self.lane

    @property
    def speed_limit_mps(self) -> float | None:
        """Connector speed limit, or None on the mainline."""
        if self.heading is Heading.TURNAROUND:
            return self.route.turnaround_speed_mps
        return None


def advance_position(pos: RoutePosition, ds: float) -> RoutePosition:
    """Move ``ds`` miles forward along the cycle, wrapping at its end."""
    if ds < 0:
        raise ValueError(f"cannot advance by negative distance {ds}")
    return replace(pos, arc_s=(pos.arc_s + ds) % pos.route.total_cycle_mi)


def is_on_testbed(pos: RoutePosition, corridor: Corridor) -> bool:
    """True when the position counts as on the experimental corridor.

    Turnaround connectors never count, regardless of marker.
    """
    if pos.heading is Heading.TURNAROUND:
        return False
    return corridor.testbed_start_mm <= pos.mile_marker <= corridor.testbed_end_mm


def is_westbound(pos: RoutePosition) -> bool:
    return pos.heading is Heading.WESTBOUND
