"""Measurement methodology: density grids, fleet counts, penetration rates.

Density follows the generalized (presence-time) definition: each cell of the
space-time grid holds total vehicle presence time divided by the cell area
``dt * dx``, expressed in vehicles per mile. Positions between consecutive
telemetry samples are interpolated linearly, and cell membership is resolved
by exact interval intersection, which makes the conservation property
(sum of cells * dt * dx == total presence time) hold to rounding error.

Samples with ``lane == 0`` are off the mainline (turning around at an
exit/entrance) and never contribute to density or testbed counts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .messages import TelemetryRecord
from .road import Corridor, FEET_PER_MILE

GRAY = "gray"


# --------------------------------------------------------------------- types


@dataclass
class DensityGrid:
    """Vehicles-per-mile over (space bin x time bin) cells."""

    dx: float
    dt: float
    origin_mm: float
    origin_t: float
    cells: np.ndarray  # shape (n_space, n_time), veh/mi

    @property
    def total_presence_s(self) -> float:
        """Total vehicle presence time represented by the grid, seconds."""
        return float(self.cells.sum() * self.dt * self.dx)


@dataclass
class CountSeries:
    """Per-window fleet counts: recording, on the testbed, engaged westbound."""

    window: float
    origin_t: float
    series_on: list[int]
    series_on_testbed: list[int]
    series_engaged_westbound: list[int]


# ------------------------------------------------------------------- helpers


def _check_sorted(streams: Sequence[Sequence[TelemetryRecord]]) -> None:
    for stream in streams:
        for a, b in zip(stream, stream[1:]):
            if b.t <= a.t:
                raise ValueError(
                    f"stream for {a.vin} is not strictly time-sorted at t={b.t}"
                )


def _qualifies(rec: TelemetryRecord, westbound_only: bool) -> bool:
    if rec.lane < 1:
        return False
    return rec.westbound if westbound_only else True


def _n_bins(extent: float, width: float) -> int:
    return max(1, math.ceil(extent / width - 1e-12))


# ------------------------------------------------------------------- density


def density_grid(
    streams: Sequence[Sequence[TelemetryRecord]],
    corridor: Corridor,
    dx: float = 0.1,
    dt: float = 300.0,
    westbound_only: bool = True,
    origin_mm: float = 0.0,
    origin_t: float = 0.0,
    t_end: float | None = None,
) -> DensityGrid:
    """Generalized density of the given trajectories over the corridor.

    ``streams`` holds one strictly time-sorted record sequence per vehicle.
    With ``westbound_only`` (the headline measurement) only westbound mainline
    travel counts; otherwise mainline travel in both directions counts.
    Turnaround samples and travel outside the corridor contribute nothing.
    """
    if dx <= 0 or dt <= 0:
        raise ValueError("dx and dt must be > 0")
    streams = [list(s) for s in streams]
    _check_sorted(streams)

    if t_end is None:
        t_end = max((s[-1].t for s in streams if s), default=origin_t)
    n_x = _n_bins(corridor.length_mi - origin_mm, dx)
    n_t = _n_bins(max(t_end - origin_t, 0.0), dt)
    presence = np.zeros((n_x, n_t))  # seconds

    for stream in streams:
        for r0, r1 in zip(stream, stream[1:]):
            if not (_qualifies(r0, westbound_only) and _qualifies(r1, westbound_only)):
                continue
            _accumulate_segment(
                presence, r0.t, r0.mile_marker, r1.t, r1.mile_marker,
                origin_mm, origin_t, dx, dt,
            )
    return DensityGrid(dx=dx, dt=dt, origin_mm=origin_mm, origin_t=origin_t,
                       cells=presence / (dt * dx))


def _accumulate_segment(presence, t0, m0, t1, m1, origin_mm, origin_t, dx, dt) -> None:
    """Split one constant-speed segment across time and space bins exactly."""
    n_x, n_t = presence.shape
    duration = t1 - t0
    k = int((t0 - origin_t) // dt)
    seg_start = t0
    while seg_start < t1:
        if k >= n_t:
            break
        bin_end = origin_t + (k + 1) * dt
        seg_end = min(t1, bin_end)
        if k >= 0 and seg_end > seg_start:
            ma = m0 + (m1 - m0) * (seg_start - t0) / duration
            mb = m0 + (m1 - m0) * (seg_end - t0) / duration
            _accumulate_space(presence, k, seg_end - seg_start, ma, mb, origin_mm, dx, n_x)
        seg_start = seg_end
        k += 1


def _accumulate_space(presence, k, elapsed, ma, mb, origin_mm, dx, n_x) -> None:
    lo, hi = (ma, mb) if ma <= mb else (mb, ma)
    if hi == lo:
        j = int((lo - origin_mm) // dx)
        if 0 <= j < n_x:
            presence[j, k] += elapsed
        return
    # speed is constant over the sample interval: time in a space bin is
    # proportional to the distance covered inside it
    j0 = max(int((lo - origin_mm) // dx), 0)
    j1 = min(int((hi - origin_mm) // dx), n_x - 1)
    span = hi - lo
    for j in range(j0, j1 + 1):
        bin_lo = origin_mm + j * dx
        overlap = min(hi, bin_lo + dx) - max(lo, bin_lo)
        if overlap > 0:
            presence[j, k] += elapsed * overlap / span


# -------------------------------------------------------- gap / penetration


def veh_per_mile_from_gap(speed_mph: float, time_gap_s: float) -> float:
    """Density implied by uniform following at a time gap: 5280 / (v_fps * gap)."""
    if speed_mph <= 0 or time_gap_s <= 0:
        raise ValueError("speed and time gap must be > 0")
    feet_per_second = speed_mph * FEET_PER_MILE / 3600.0
    return FEET_PER_MILE / (feet_per_second * time_gap_s)


def penetration_rate(control_passing_rate: float, total_flow: float) -> float:
    """Fraction of the flow that is controlled, in [0, 1]."""
    if total_flow <= 0:
        raise ValueError("total_flow must be > 0")
    if not 0 <= control_passing_rate <= total_flow:
        raise ValueError(
            f"control rate {control_passing_rate} outside [0, {total_flow}]"
        )
    return control_passing_rate / total_flow


def penetration_rate_in_controlled_lanes(
    control_passing_rate: float, total_flow: float, lane_flow_share: float
) -> float:
    """Penetration against only the lanes the controlled vehicles occupy.

    ``lane_flow_share`` is the fraction of total flow carried by those lanes
    (an explicit input; e.g. 3 of 4 evenly loaded lanes -> 0.75).
    """
    if not 0 < lane_flow_share <= 1:
        raise ValueError("lane_flow_share must be in (0, 1]")
    return penetration_rate(control_passing_rate, total_flow * lane_flow_share)


# -------------------------------------------------------------------- counts


def count_series(
    streams: Sequence[Sequence[TelemetryRecord]],
    corridor: Corridor,
    window: float = 300.0,
    origin_t: float = 0.0,
    t_end: float | None = None,
) -> CountSeries:
    """Fleet counts per time window.

    on: recording has started and not yet ended during the window.
    on_testbed: on, with some sample inside testbed bounds on the mainline
    (turnaround samples never qualify). engaged_westbound: a qualifying sample
    that is also westbound with control engaged.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    streams = [list(s) for s in streams if s]
    _check_sorted(streams)
    if t_end is None:
        t_end = max((s[-1].t for s in streams), default=origin_t)
    n_w = int(max(t_end - origin_t, 0.0) // window) + 1

    on = [set() for _ in range(n_w)]
    on_testbed = [set() for _ in range(n_w)]
    engaged = [set() for _ in range(n_w)]
    for stream in streams:
        vin = stream[0].vin
        first_w = int((stream[0].t - origin_t) // window)
        last_w = int((stream[-1].t - origin_t) // window)
        for w in range(max(first_w, 0), min(last_w, n_w - 1) + 1):
            on[w].add(vin)
        for rec in stream:
            w = int((rec.t - origin_t) // window)
            if not 0 <= w < n_w:
                continue
            sample_on_testbed = (
                rec.lane >= 1
                and corridor.testbed_start_mm <= rec.mile_marker <= corridor.testbed_end_mm
            )
            if sample_on_testbed:
                on_testbed[w].add(vin)
                if rec.westbound and rec.control_engaged:
                    engaged[w].add(vin)
    return CountSeries(
        window=window,
        origin_t=origin_t,
        series_on=[len(s) for s in on],
        series_on_testbed=[len(s) for s in on_testbed],
        series_engaged_westbound=[len(s) for s in engaged],
    )


# ----------------------------------------------------------------- plot data


def _field(rec: Any, name: str, default=None):
    if isinstance(rec, Mapping):
        return rec.get(name, default)
    return getattr(rec, name, default)


def trajectory_plot_data(streams: Iterable[Sequence[Any]]) -> list[dict[str, Any]]:
    """One plot point per sample: commanded speed while engaged, gray otherwise.

    Accepts telemetry records or state-log samples (mappings); the color value
    is the commanded speed when present, else the measured speed.
    """
    points = []
    for stream in streams:
        for rec in stream:
            engaged = bool(_field(rec, "control_engaged"))
            if engaged:
                color = _field(rec, "commanded_speed")
                if color is None:
                    color = _field(rec, "speed")
            else:
                color = GRAY
            points.append(
                {
                    "vin": _field(rec, "vin"),
                    "t": _field(rec, "t"),
                    "mile_marker": _field(rec, "mile_marker"),
                    "color": color,
                }
            )
    return points


# ------------------------------------------------------------------- output


def write_density_csv(grid: DensityGrid, path) -> None:
    n_x, n_t = grid.cells.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# generalized density, veh/mi; cell = presence_s / (dt*dx)\n")
        fh.write(
            f"# rows: space bins of dx={grid.dx} mi from mile marker {grid.origin_mm}; "
            f"columns: windows of dt={grid.dt} s from t={grid.origin_t} s\n"
        )
        header = ["mm_bin_start"] + [f"t={grid.origin_t + k * grid.dt:g}s" for k in range(n_t)]
        fh.write(",".join(header) + "\n")
        for j in range(n_x):
            row = [f"{grid.origin_mm + j * grid.dx:g}"] + [repr(float(v)) for v in grid.cells[j]]
            fh.write(",".join(row) + "\n")


def write_counts_csv(series: CountSeries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# fleet counts per {series.window:g} s window from t={series.origin_t:g} s\n")
        fh.write("window_start_s,on,on_testbed,engaged_westbound\n")
        for i, (a, b, c) in enumerate(
            zip(series.series_on, series.series_on_testbed, series.series_engaged_westbound)
        ):
            fh.write(f"{series.origin_t + i * series.window:g},{a},{b},{c}\n")


def write_plot_jsonl(points: Iterable[Mapping[str, Any]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            fh.write(json.dumps(p, sort_keys=True) + "\n")
