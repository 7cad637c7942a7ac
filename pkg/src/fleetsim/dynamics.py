"""Longitudinal vehicle dynamics and control arbitration.

Three acceleration policies live here: the Intelligent Driver Model for
background human traffic, a constant-time-gap linear policy emulating a stock
adaptive cruise controller, and a reference wave-smoothing controller that
targets the average speed of downstream traffic. The arbitration function
decides, each evaluation, which policy is actually allowed to command the
vehicle.

Scalar formulas accept numpy arrays elementwise, which the long-horizon ring
soak tests rely on.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .messages import RelayMeasurement
from .road import METERS_PER_MILE, RoutePosition, advance_position


class CollisionError(RuntimeError):
    """A follower reached non-positive gap; the simulation is invalid past this."""


class ArbitrationMode(str, Enum):
    DISENGAGED = "disengaged"
    STOCK_ACC = "stock_acc"
    EXPERIMENTAL = "experimental"


@dataclass(frozen=True)
class HumanDriverParams:
    """Intelligent Driver Model parameters for background traffic.

    Attributes
    ----------
    v0 : float
        desired speed, m/s
    T : float
        desired time gap, s
    a_max : float
        maximum acceleration, m/s^2
    b_comf : float
        comfortable deceleration (positive), m/s^2
    delta : float
        acceleration exponent
    s0 : float
        jam spacing, m
    vehicle_length : float
        bumper-to-bumper length, m
    b_hard : float
        hard braking bound used to clamp commanded deceleration, m/s^2
    """

    v0: float = 33.0
    T: float = 1.4
    a_max: float = 1.2
    b_comf: float = 2.0
    delta: float = 4.0
    s0: float = 2.0
    vehicle_length: float = 4.5
    b_hard: float = 8.0

    def __post_init__(self) -> None:
        for name in ("v0", "T", "a_max", "b_comf", "delta", "s0", "vehicle_length", "b_hard"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass(frozen=True)
class StockAccParams:
    """Constant-time-gap ACC policy parameters (one OEM flavor)."""

    t_gap: float = 1.8        # desired time gap, s
    k_gap: float = 0.20       # gain on gap error, 1/s^2
    k_rel: float = 0.60       # gain on relative speed, 1/s
    k_speed: float = 0.40     # gain on set-speed error, 1/s
    a_max: float = 1.5        # accel bound, m/s^2
    a_min: float = -3.5       # decel bound, m/s^2
    sensor_range: float = 120.0  # leader detection range, m


# Stand-ins for the three supported vehicle platforms; same policy, different tune.
ACC_PRESETS: dict[str, StockAccParams] = {
    "oem_a": StockAccParams(t_gap=1.6, k_gap=0.23, k_rel=0.70, k_speed=0.40, a_max=1.6, a_min=-3.5),
    "oem_b": StockAccParams(t_gap=1.8, k_gap=0.20, k_rel=0.60, k_speed=0.40, a_max=1.5, a_min=-3.0),
    "oem_c": StockAccParams(t_gap=2.1, k_gap=0.16, k_rel=0.55, k_speed=0.35, a_max=1.3, a_min=-3.0),
}


@dataclass(frozen=True)
class ControllerCommand:
    """Time-dependent request from the experimental controller."""

    target_speed: float
    issued_at: float

    def __post_init__(self) -> None:
        if self.target_speed < 0:
            raise ValueError(f"target_speed must be >= 0, got {self.target_speed}")


@dataclass(frozen=True)
class VehicleState:
    """Kinematic and control-mode state of one simulated vehicle."""

    vin: str
    pos: RoutePosition
    speed: float
    accel: float = 0.0
    mode: ArbitrationMode = ArbitrationMode.DISENGAGED
    commanded_speed: float | None = None
    driver_engaged: bool = False

    def __post_init__(self) -> None:
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class ArbitrationTimings:
    heartbeat_timeout: float = 0.5
    command_timeout: float = 0.5


def idm_accel(ego_speed, gap, lead_speed, p: HumanDriverParams):
    """Intelligent Driver Model acceleration.

    a = a_max * [1 - (v/v0)^delta - (s*/gap)^2], with the desired gap
    s* = s0 + v*T + v*(v - v_lead) / (2*sqrt(a_max*b_comf)). The result is
    clamped to [-b_hard, a_max]. A free road is expressed as ``gap=inf``.
    """
    if np.any(np.asarray(gap) <= 0.0):
        raise CollisionError(f"non-positive gap {gap}")
    dv = ego_speed - lead_speed
    s_star = p.s0 + ego_speed * p.T + ego_speed * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
    # Integer exponents keep the power exact and platform-stable.
    exponent = int(p.delta) if float(p.delta).is_integer() else p.delta
    accel = p.a_max * (1.0 - (ego_speed / p.v0) ** exponent - (s_star / gap) ** 2)
    return np.clip(accel, -p.b_hard, p.a_max)


def idm_equilibrium_gap(speed: float, p: HumanDriverParams) -> float:
    """Gap at which IDM holds ``speed`` steadily behind an equal-speed leader."""
    if not 0 <= speed < p.v0:
        raise ValueError(f"equilibrium requires 0 <= speed < v0, got {speed}")
    return (p.s0 + speed * p.T) / math.sqrt(1.0 - (speed / p.v0) ** p.delta)


def idm_equilibrium_speed(gap: float, p: HumanDriverParams) -> float:
    """Inverse of :func:`idm_equilibrium_gap`, by bisection."""
    if gap <= p.s0:
        return 0.0
    lo, hi = 0.0, p.v0 * (1.0 - 1e-12)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if idm_equilibrium_gap(mid, p) < gap:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def stock_acc_accel(ego_speed, gap, lead_speed, set_speed, p: StockAccParams):
    """Stock adaptive-cruise emulation: constant-time-gap linear policy.

    With a leader in range the commanded acceleration is the minimum of the
    set-speed tracking term and the gap-regulation term
    k_gap*(gap - t_gap*v) + k_rel*(v_lead - v); without one it is the tracking
    term alone. Output is clamped to [a_min, a_max]. ``gap=inf`` means no
    leader within sensor range.
    """
    if np.any(np.asarray(gap) <= 0.0):
        raise CollisionError(f"non-positive gap {gap}")
    speed_term = p.k_speed * (set_speed - ego_speed)
    gap_term = p.k_gap * (gap - p.t_gap * ego_speed) + p.k_rel * (lead_speed - ego_speed)
    accel = np.minimum(speed_term, gap_term)
    return np.clip(accel, p.a_min, p.a_max)


@dataclass(frozen=True)
class SmoothingParams:
    """Tuning for the reference downstream-averaging wave smoother."""

    set_speed: float = 30.0          # fallback target and command ceiling, m/s
    lookahead_mi: float = 0.8        # relay window queried ahead of the ego vehicle
    window_mode: str = "downstream"  # "downstream" window, or "ring" for the whole corridor
    max_measurement_age: float = 10.0  # downstream samples older than this are ignored, s
    slew: float = 0.5                # max |target change| per command, m/s
    comfort_decel: float = 2.0       # never ask for more than this while the gap is safe, m/s^2
    comfort_horizon: float = 1.0     # horizon used to turn comfort_decel into a speed floor, s
    safe_gap_time: float = 1.0       # gap below ego_speed*this waives the comfort floor, s
    lead_memory: int = 10            # lead-speed samples kept for the fallback average


class SmoothingController:
    """Reference wave-smoothing controller: drive at the pace of traffic ahead.

    The target speed is a bounded moving average of downstream relay
    measurements; with none available it falls back to an average of recent
    lead-vehicle speeds, then to the set speed. Commands are slew-limited, and
    while the gap is safe the target never demands deceleration beyond the
    comfort bound. The controller is total: it always returns a command.
    """

    def __init__(self, vin: str, params: SmoothingParams | None = None) -> None:
        self.vin = vin
        self.params = params or SmoothingParams()
        self._prev_target: float | None = None
        self._last_issued_at: float | None = None
        self._lead_speeds: deque[float] = deque(maxlen=self.params.lead_memory)

    def command(
        self,
        ego: VehicleState,
        downstream: Sequence[RelayMeasurement],
        lead_speed: float | None = None,
        gap: float | None = None,
        now: float = 0.0,
    ) -> ControllerCommand:
        p = self.params
        if self._last_issued_at is not None and now < self._last_issued_at:
            raise ValueError(f"command times must be monotone ({now} < {self._last_issued_at})")

        if lead_speed is not None:
            self._lead_speeds.append(lead_speed)

        fresh = [
            m.speed
            for m in downstream
            if m.source_vin != self.vin and now - m.t <= p.max_measurement_age
        ]
        if fresh:
            raw = sum(fresh) / len(fresh)
        elif self._lead_speeds:
            raw = sum(self._lead_speeds) / len(self._lead_speeds)
        else:
            raw = p.set_speed
        raw = min(max(raw, 0.0), p.set_speed)

        prev = self._prev_target if self._prev_target is not None else ego.speed
        target = prev + min(max(raw - prev, -p.slew), p.slew)

        gap_is_safe = gap is None or gap > ego.speed * p.safe_gap_time
        if gap_is_safe:
            target = max(target, ego.speed - p.comfort_decel * p.comfort_horizon)
        target = min(max(target, 0.0), p.set_speed)

        self._prev_target = target
        self._last_issued_at = now
        return ControllerCommand(target_speed=float(target), issued_at=now)


def arbitrate(
    current: ArbitrationMode,
    driver_engaged: bool,
    whitelisted: bool,
    heartbeat_age: float,
    command_age: float,
    cfg: ArbitrationTimings,
) -> ArbitrationMode:
    """Control arbitration: experimental control only behind all four guards.

    EXPERIMENTAL requires the driver engaged, the central whitelist, a fresh
    connectivity heartbeat, and a fresh controller command; otherwise the
    vehicle runs stock cruise control while engaged, or nothing at all. The
    decision is memoryless: a lapse drops out immediately and re-entry is
    allowed as soon as every predicate holds again (``current`` exists for
    latching wrappers layered on top).
    """
    if heartbeat_age < 0 or command_age < 0:
        raise ValueError("ages must be >= 0")
    if not driver_engaged:
        return ArbitrationMode.DISENGAGED
    if (
        whitelisted
        and heartbeat_age <= cfg.heartbeat_timeout
        and command_age <= cfg.command_timeout
    ):
        return ArbitrationMode.EXPERIMENTAL
    return ArbitrationMode.STOCK_ACC


def step_vehicle(state: VehicleState, accel: float, dt: float) -> VehicleState:
    """Semi-implicit Euler step: update speed, then advance with the new speed.

    Speed clamps at zero (no reversing). The applied acceleration is recorded
    as-is even when the clamp truncates its effect.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    speed = float(max(0.0, state.speed + accel * dt))
    pos = advance_position(state.pos, speed * dt / METERS_PER_MILE)
    return replace(state, pos=pos, speed=speed, accel=float(accel))
