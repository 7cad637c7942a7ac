import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetsim.road import (
    Corridor,
    Heading,
    LoopRoute,
    RoutePosition,
    advance_position,
    is_on_testbed,
    is_westbound,
)

ROUTE = LoopRoute(
    route_id="loop",
    westbound_entry_mm=5.0,
    westbound_exit_mm=0.0,
    turnaround_length_mi=0.15,
)
CORRIDOR = Corridor()


def pos(arc, lane=1, route=ROUTE):
    return RoutePosition(route=route, arc_s=arc, lane=lane)


def stepping_oracle(arc, ds, cycle, step=1e-4):
    """Advance by repeated small steps; independent of the modular update."""
    a = arc
    while ds > step:
        a = (a + step) % cycle
        ds -= step
    return (a + ds) % cycle


class TestCorridorInvariants:
    def test_defaults_valid(self):
        c = Corridor()
        assert c.length_mi == 5.0 and c.lane_count == 4 and c.controlled_lanes == 3

    def test_bad_testbed_bounds(self):
        with pytest.raises(ValueError):
            Corridor(testbed_start_mm=3.0, testbed_end_mm=3.0)
        with pytest.raises(ValueError):
            Corridor(testbed_end_mm=6.0)

    def test_bad_lanes(self):
        with pytest.raises(ValueError):
            Corridor(controlled_lanes=5)
        with pytest.raises(ValueError):
            Corridor(controlled_lanes=0)


class TestLoopRoute:
    def test_cycle_length(self):
        assert ROUTE.total_cycle_mi == pytest.approx(2 * 5.0 + 2 * 0.15)

    def test_entry_must_exceed_exit(self):
        with pytest.raises(ValueError):
            LoopRoute("bad", 1.0, 2.0, 0.1)

    def test_route_outside_corridor_rejected(self):
        r = LoopRoute("big", 6.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            r.validate_within(CORRIDOR)


class TestAdvancePosition:
    def test_zero_advance_identity(self):
        p = pos(0.0)
        assert advance_position(p, 0.0).arc_s == 0.0

    def test_wraparound(self):
        p = pos(ROUTE.total_cycle_mi - 0.1)
        assert advance_position(p, 0.2).arc_s == pytest.approx(0.1, abs=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            advance_position(pos(1.0), -0.001)

    @given(
        arc=st.floats(0.0, ROUTE.total_cycle_mi, exclude_max=True),
        ds=st.floats(0.0, 25.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_matches_stepping_oracle(self, arc, ds):
        got = advance_position(pos(arc), ds).arc_s
        want = stepping_oracle(arc, ds, ROUTE.total_cycle_mi)
        # compare on the circle: wraps may land epsilon-apart across 0
        diff = abs(got - want)
        assert min(diff, ROUTE.total_cycle_mi - diff) < 1e-9

    @given(
        arc=st.floats(0.0, ROUTE.total_cycle_mi, exclude_max=True),
        a=st.floats(0.0, 10.0),
        b=st.floats(0.0, 10.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_associative(self, arc, a, b):
        p = pos(arc)
        twice = advance_position(advance_position(p, a), b).arc_s
        once = advance_position(p, a + b).arc_s
        diff = abs(twice - once)
        assert min(diff, ROUTE.total_cycle_mi - diff) < 1e-9


class TestSegments:
    def test_partition_and_continuity(self):
        # Sweep the cycle: exactly one heading everywhere, marker continuous.
        n = 20000
        cycle = ROUTE.total_cycle_mi
        step = cycle / n
        prev_mm = None
        seen = set()
        for i in range(n):
            mm, heading = ROUTE.locate(i * step)
            assert 0.0 <= mm <= CORRIDOR.length_mi
            seen.add(heading)
            if prev_mm is not None:
                assert abs(mm - prev_mm) <= step * 1.0001
            prev_mm = mm
        assert seen == {Heading.WESTBOUND, Heading.EASTBOUND, Heading.TURNAROUND}

    def test_westbound_decreases_marker(self):
        mm0, h0 = ROUTE.locate(1.0)
        mm1, h1 = ROUTE.locate(1.5)
        assert h0 is Heading.WESTBOUND and h1 is Heading.WESTBOUND
        assert mm1 < mm0

    def test_turnaround_holds_marker(self):
        leg = ROUTE.leg_mi
        mm, h = ROUTE.locate(leg + 0.5 * ROUTE.turnaround_length_mi)
        assert h is Heading.TURNAROUND
        assert mm == ROUTE.westbound_exit_mm

    def test_reported_lane_zero_on_turnaround(self):
        p = pos(ROUTE.leg_mi + 0.01, lane=3)
        assert p.heading is Heading.TURNAROUND
        assert p.reported_lane == 0
        assert pos(0.5, lane=3).reported_lane == 3


class TestTestbedPredicates:
    def test_turnaround_never_on_testbed(self):
        p = pos(ROUTE.leg_mi + 0.01)  # turnaround, marker 0.0 within bounds
        assert not is_on_testbed(p, CORRIDOR)

    def test_westbound_inside_bounds(self):
        p = pos(3.0)  # westbound at mm 2.0
        assert p.heading is Heading.WESTBOUND and p.mile_marker == pytest.approx(2.0)
        assert is_on_testbed(p, CORRIDOR)

    def test_out_of_bounds_marker(self):
        narrow = Corridor(length_mi=6.0, testbed_start_mm=0.0, testbed_end_mm=5.0)
        route = LoopRoute("wide", 5.2, 0.0, 0.15)
        p = RoutePosition(route=route, arc_s=route.leg_mi + route.turnaround_length_mi + 5.15, lane=1)
        assert p.heading is Heading.EASTBOUND and p.mile_marker == pytest.approx(5.15)
        assert not is_on_testbed(p, narrow)

    def test_is_westbound(self):
        assert is_westbound(pos(1.0))
        assert not is_westbound(pos(ROUTE.leg_mi + 0.01))
        assert not is_westbound(pos(ROUTE.leg_mi + ROUTE.turnaround_length_mi + 1.0))
