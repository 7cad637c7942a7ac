"""Independent oracles and synthetic data generators shared by the tests.

The density oracle here is deliberately brute force: midpoint sampling at a
fine step, attributing each sub-interval to the cell of its midpoint. It
shares no interval-intersection logic with the implementation.
"""
from __future__ import annotations

import math

import numpy as np

from fleetsim.messages import TelemetryRecord
from fleetsim.road import Corridor, Heading, LoopRoute, METERS_PER_MILE


def oracle_density_fine_sampling(
    streams,
    corridor: Corridor,
    dx: float,
    dt: float,
    westbound_only: bool,
    origin_mm: float = 0.0,
    origin_t: float = 0.0,
    t_end: float | None = None,
    substeps_per_second: int = 512,
) -> np.ndarray:
    """Brute-force density grid (veh/mi) by midpoint time sampling."""
    streams = [list(s) for s in streams]
    if t_end is None:
        t_end = max((s[-1].t for s in streams if s), default=origin_t)
    n_x = max(1, math.ceil((corridor.length_mi - origin_mm) / dx - 1e-12))
    n_t = max(1, math.ceil(max(t_end - origin_t, 0.0) / dt - 1e-12))
    presence = np.zeros(n_x * n_t)

    for stream in streams:
        for r0, r1 in zip(stream, stream[1:]):
            ok0 = r0.lane >= 1 and (r0.westbound or not westbound_only)
            ok1 = r1.lane >= 1 and (r1.westbound or not westbound_only)
            if not (ok0 and ok1):
                continue
            span = r1.t - r0.t
            n = max(1, int(round(span * substeps_per_second)))
            frac = (np.arange(n) + 0.5) / n
            tm = r0.t + frac * span
            mm = r0.mile_marker + frac * (r1.mile_marker - r0.mile_marker)
            j = np.floor((mm - origin_mm) / dx).astype(np.int64)
            k = np.floor((tm - origin_t) / dt).astype(np.int64)
            valid = (j >= 0) & (j < n_x) & (k >= 0) & (k < n_t)
            idx = j[valid] * n_t + k[valid]
            presence += np.bincount(idx, minlength=n_x * n_t) * (span / n)
    return presence.reshape(n_x, n_t) / (dt * dx)


def random_loop_streams(
    rng: np.random.Generator,
    n_vehicles: int,
    duration_s: float,
    corridor: Corridor | None = None,
    route: LoopRoute | None = None,
    sample_period: float = 1.0,
) -> list[list[TelemetryRecord]]:
    """Synthetic 1 Hz telemetry for vehicles circulating a loop route."""
    corridor = corridor or Corridor()
    route = route or LoopRoute("loop", corridor.length_mi, 0.0, 0.15)
    streams = []
    for i in range(n_vehicles):
        vin = f"SYN{i:03d}"
        arc = float(rng.uniform(0, route.total_cycle_mi))
        speed = float(rng.uniform(3.0, 32.0))
        lane = int(rng.integers(1, corridor.lane_count + 1))
        engaged = bool(rng.random() < 0.5)
        start = float(rng.uniform(0, duration_s * 0.25))
        records = []
        t = start
        while t <= duration_s:
            mm, heading = route.locate(arc)
            records.append(
                TelemetryRecord(
                    vin=vin,
                    t=t,
                    mile_marker=mm,
                    lane=0 if heading is Heading.TURNAROUND else lane,
                    speed=speed,
                    accel=0.0,
                    control_engaged=engaged and heading is Heading.WESTBOUND,
                    westbound=heading is Heading.WESTBOUND,
                )
            )
            speed = float(np.clip(speed + rng.normal(0, 1.5), 0.0, 35.0))
            arc = (arc + speed * sample_period / METERS_PER_MILE) % route.total_cycle_mi
            if rng.random() < 0.02:
                engaged = not engaged
            t += sample_period
        streams.append(records)
    return streams
