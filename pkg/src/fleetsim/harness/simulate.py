"""Deterministic fixed-step simulation wired to the fleet server over HTTP.

Each tick: controlled vehicles flush any delayed messages, poll their
heartbeat verdict and relay window, compute a controller command, arbitrate,
and pick an acceleration; telemetry, health, and relay publishes go out on
their configured cadences through the real wire API against the embedded
server. All effects are sampled once per tick in fixed fleet order, and all
randomness comes from one seeded generator, so a (scenario, seed) pair
reproduces its run log byte for byte.

Telemetry is observation-only: nothing in the loop feeds it back into vehicle
state. Controllers see only relay measurements and local sensing.
"""
from __future__ import annotations

import bisect
import hashlib
import json
import math
import os
import time
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..dynamics import (
    ArbitrationMode,
    ArbitrationTimings,
    ControllerCommand,
    SmoothingController,
    VehicleState,
    arbitrate,
    idm_accel,
    step_vehicle,
    stock_acc_accel,
)
from ..messages import RelayMeasurement
from ..road import Heading, METERS_PER_MILE, RoutePosition
from ..server import FleetClient, FleetHttpServer, FleetState, ServerConfig, SimClock
from .scenario import ScenarioConfig

BATTERY_NOMINAL_V = 12.6
BATTERY_DRAIN_V_PER_S = 5e-4
SCHEDULE_EPS = 1e-9
MERGE_WINDOW_MI = 0.025  # mainline clearance needed around a turnaround exit

SCENARIO_SNAPSHOT = "scenario.snapshot"
MESSAGES_FILE = "messages.jsonl"
STATES_FILE = "states.jsonl"
INTEGRITY_FILE = "integrity.hash"


class RunAborted(RuntimeError):
    """Collision or lost server: the run is invalid past this point."""


@dataclass
class RunLog:
    """Handle to a finished run's on-disk log directory."""

    out_dir: Path
    scenario_hash: str
    ticks: int
    messages: int

    @property
    def states_path(self) -> Path:
        return self.out_dir / STATES_FILE

    @property
    def messages_path(self) -> Path:
        return self.out_dir / MESSAGES_FILE


class _Schedule:
    """Fixed-cadence due times with a per-vehicle stagger offset."""

    def __init__(self, period: float, offset: float):
        self.period = period
        self.due = offset

    def fire(self, now: float) -> bool:
        if now + SCHEDULE_EPS >= self.due:
            self.due += self.period
            return True
        return False


class VehicleAgent:
    """One vehicle: dynamics plus, for controlled vehicles, the protocol stack."""

    def __init__(self, entry, scenario: ScenarioConfig, index: int,
                 client: FleetClient | None, rng: np.random.Generator):
        self.vin = entry.vin
        self.role = entry.role
        self.set_speed = entry.set_speed
        self.scenario = scenario
        self.route = scenario.routes[entry.route_id]
        self.rng = rng
        self.client = client
        self.state = VehicleState(
            vin=entry.vin,
            pos=RoutePosition(self.route, entry.arc_s, entry.lane),
            speed=entry.initial_speed,
        )
        self.timings = ArbitrationTimings(
            heartbeat_timeout=scenario.timings.heartbeat_timeout,
            command_timeout=scenario.timings.command_timeout,
        )
        if self.role == "cav":
            self.controller = SmoothingController(entry.vin, scenario.controller_params_for(entry.vin))
            t = scenario.timings
            dt = scenario.dt
            def stagger(period):
                ticks = max(1, round(period / dt))
                return (index % ticks) * dt
            self._heartbeat = _Schedule(t.heartbeat_period, stagger(t.heartbeat_period))
            self._telemetry = _Schedule(t.telemetry_period, stagger(t.telemetry_period))
            self._health = _Schedule(t.health_period, stagger(t.health_period))
            self._relay_query = _Schedule(t.relay_query_period, stagger(t.relay_query_period))
            self._relay_publish = _Schedule(t.relay_publish_period, stagger(t.relay_publish_period))
        else:
            self.controller = None

        self.last_whitelisted = False
        self.last_verdict_t = -math.inf
        self.last_cmd: ControllerCommand | None = None
        self.relay_cache: list[RelayMeasurement] = []
        self.outbox: deque = deque()

        # decided-per-tick values, committed at the end of the tick
        self._accel = 0.0
        self._mode = ArbitrationMode.DISENGAGED
        self._engaged = False

    # ------------------------------------------------------------- network

    def _dispatch(self, now: float, action) -> None:
        net = self.scenario.network
        if net.drop_prob > 0.0 and self.rng.random() < net.drop_prob:
            return
        if net.latency_s > 0.0:
            self.outbox.append((now + net.latency_s, action))
        else:
            action(now)

    def flush_outbox(self, now: float) -> None:
        while self.outbox and self.outbox[0][0] <= now + SCHEDULE_EPS:
            _, action = self.outbox.popleft()
            action(now)

    # ------------------------------------------------------------ protocol

    def poll(self, now: float) -> None:
        """Heartbeat (the round-trip carries the verdict) and relay query."""
        if self.role != "cav":
            return
        if self._heartbeat.fire(now):
            t_gen = now

            def beat(flush_now: float) -> None:
                resp = self.client.post_heartbeat(self.vin, t_gen)
                self.last_whitelisted = bool(resp["whitelisted"])
                self.last_verdict_t = flush_now

            self._dispatch(now, beat)
        if self._driver_wants_experimental() and self._relay_query.fire(now):
            params = self.controller.params
            if params.window_mode == "ring":
                lo, hi = 0.0, self.scenario.corridor.length_mi
            else:
                mm = self.state.pos.mile_marker
                lo, hi = max(0.0, mm - params.lookahead_mi), mm

            def query(flush_now: float, lo=lo, hi=hi) -> None:
                found = self.client.get_relay(lo, hi, max_age=params.max_measurement_age)
                self.relay_cache = [RelayMeasurement.from_dict(d) for d in found]

            self._dispatch(now, query)

    def emit_observations(self, now: float) -> None:
        """Telemetry, relay publish, and health on their cadences."""
        if self.role != "cav":
            return
        pos = self.state.pos
        westbound = pos.heading is Heading.WESTBOUND
        if self._telemetry.fire(now):
            record = {
                "vin": self.vin,
                "t": now,
                "mile_marker": round(float(pos.mile_marker), 6),
                "lane": pos.reported_lane,
                "speed": round(float(self.state.speed), 4),
                "accel": round(float(self.state.accel), 4),
                "control_engaged": self._mode is ArbitrationMode.EXPERIMENTAL,
                "westbound": westbound,
            }
            self._dispatch(now, lambda _now, r=record: self.client.post_telemetry(r))
        if self._relay_publish.fire(now):
            if westbound or not self.scenario.relay_publish_westbound_only:
                measurement = {
                    "source_vin": self.vin,
                    "t": now,
                    "mile_marker": round(float(pos.mile_marker), 6),
                    "lane": pos.reported_lane,
                    "speed": round(float(self.state.speed), 4),
                }
                self._dispatch(now, lambda _now, m=measurement: self.client.post_relay(m))
        if self._health.fire(now):
            assignment = self.scenario.assignments.get(self.vin, "default")
            report = {
                "vin": self.vin,
                "t": now,
                "battery_voltage": round(BATTERY_NOMINAL_V - BATTERY_DRAIN_V_PER_S * now, 4),
                "software_version_hashes": [
                    list(p) for p in self.scenario.version_sets[assignment].hashes
                ],
                "uptime": now,
                "recording": True,
            }
            self._dispatch(now, lambda _now, r=report: self.client.post_health(r))

    # ------------------------------------------------------------- control

    def _driver_wants_experimental(self) -> bool:
        if self.role != "cav":
            return False
        policy = self.scenario.operator
        if policy.mode == "always":
            return True
        pos = self.state.pos
        if pos.heading is not Heading.WESTBOUND:
            return False
        return pos.mile_marker >= self.route.westbound_exit_mm + policy.disengage_margin_mi

    def decide(self, now: float, gap_m: float, lead_speed: float | None) -> None:
        """Choose this tick's acceleration; committed later in fleet order."""
        scenario = self.scenario
        state = self.state
        engaged = self._driver_wants_experimental()

        if engaged:
            in_range = gap_m <= scenario.acc.sensor_range
            self.last_cmd = self.controller.command(
                state,
                self.relay_cache,
                lead_speed=lead_speed if in_range else None,
                gap=gap_m if gap_m != math.inf else None,
                now=now,
            )
        heartbeat_age = now - self.last_verdict_t
        command_age = now - self.last_cmd.issued_at if self.last_cmd is not None else math.inf
        mode = arbitrate(
            state.mode, engaged, self.last_whitelisted, max(heartbeat_age, 0.0),
            max(command_age, 0.0), self.timings,
        )

        if mode is ArbitrationMode.EXPERIMENTAL:
            accel = self._acc_accel(gap_m, lead_speed, self.last_cmd.target_speed)
        elif mode is ArbitrationMode.STOCK_ACC:
            accel = self._acc_accel(gap_m, lead_speed, self.set_speed)
        else:
            accel = float(idm_accel(state.speed, gap_m, lead_speed if lead_speed is not None else state.speed,
                                    scenario.driver))
            if scenario.accel_noise > 0.0:
                accel += float(self.rng.normal(0.0, scenario.accel_noise))

        accel = self._apply_connector_limit(float(accel))
        self._accel = float(accel)
        self._mode = mode
        self._engaged = engaged

    def _apply_connector_limit(self, accel: float) -> float:
        """Slow for the turnaround: hold its limit on it, brake smoothly into it."""
        pos = self.state.pos
        route = self.route
        dt = self.scenario.dt
        limit = route.turnaround_speed_mps
        if pos.heading is Heading.TURNAROUND:
            return min(accel, (limit - self.state.speed) / dt)
        if pos.heading is Heading.WESTBOUND:
            dist_mi = route.leg_mi - pos.arc_s
        else:
            dist_mi = (2.0 * route.leg_mi + route.turnaround_length_mi) - pos.arc_s
        dist_m = max(dist_mi, 0.0) * METERS_PER_MILE
        # comfortable-braking speed envelope into the connector
        allowed = math.sqrt(limit * limit + 2.0 * self.scenario.driver.b_comf * dist_m)
        return min(accel, (allowed - self.state.speed) / dt)

    def _acc_accel(self, gap_m: float, lead_speed: float | None, set_speed: float) -> float:
        acc = self.scenario.acc
        if gap_m > acc.sensor_range:
            gap_m, lead_speed = math.inf, 0.0
        return float(stock_acc_accel(self.state.speed, gap_m, lead_speed or 0.0, set_speed, acc))

    def commit(self, dt: float) -> None:
        stepped = step_vehicle(self.state, self._accel, dt)
        commanded = (
            self.last_cmd.target_speed if self._mode is ArbitrationMode.EXPERIMENTAL else None
        )
        self.state = replace(
            stepped, mode=self._mode, commanded_speed=commanded, driver_engaged=self._engaged
        )

    def state_sample(self, now: float) -> dict:
        pos = self.state.pos
        commanded = (
            round(self.last_cmd.target_speed, 4)
            if self._mode is ArbitrationMode.EXPERIMENTAL
            else None
        )
        return {
            "vin": self.vin,
            "route": pos.route_id,
            "arc_s": round(pos.arc_s, 6),
            "mile_marker": round(pos.mile_marker, 6),
            "lane": pos.reported_lane,
            "heading": pos.heading.value,
            "speed": round(self.state.speed, 4),
            "accel": round(self._accel, 4),
            "mode": self._mode.value,
            "commanded_speed": commanded,
            "driver_engaged": self._engaged,
        }


class SimulationRun:
    """One scenario execution against an embedded fleet server."""

    def __init__(self, scenario: ScenarioConfig, out_dir: str | Path,
                 port: int | None = None, pace: float = 0.0):
        self.scenario = scenario
        self.out_dir = Path(out_dir)
        self.pace = pace
        self.now = 0.0
        if port is None:
            port = int(os.environ.get("FLEETSIM_PORT", "0"))
        self._requested_port = port

    # --------------------------------------------------------------- wiring

    def _server_config(self) -> ServerConfig:
        s = self.scenario
        return ServerConfig(
            heartbeat_timeout_s=s.timings.heartbeat_timeout,
            staleness_threshold_s=s.server.staleness_threshold_s,
            low_battery_v=s.server.low_battery_v,
            relay_ttl_s=s.server.relay_ttl_s,
            testbed_start_mm=s.corridor.testbed_start_mm,
            testbed_end_mm=s.corridor.testbed_end_mm,
            version_sets={sid: vs.hashes for sid, vs in s.version_sets.items()},
        )

    def _log_message(self, method, path, body, status, response) -> None:
        line = json.dumps(
            {"t": self.now, "method": method, "path": path, "body": body,
             "status": status, "response": response}
        )
        self._messages_fh.write(line + "\n")
        self._message_count += 1

    def execute(self) -> RunLog:
        scenario = self.scenario
        self.out_dir.mkdir(parents=True, exist_ok=True)
        clock = SimClock()
        state = FleetState(self._server_config(), clock)
        server = FleetHttpServer(state, port=self._requested_port).start()
        self._message_count = 0
        clients: list[FleetClient] = []

        snapshot = {
            "scenario_hash": scenario.scenario_hash(),
            "scenario": scenario.canonical_dict(),
        }
        (self.out_dir / SCENARIO_SNAPSHOT).write_text(
            json.dumps(snapshot, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )

        rng = np.random.default_rng([scenario.seed, 1])
        try:
            with open(self.out_dir / MESSAGES_FILE, "w", encoding="utf-8") as messages_fh, \
                 open(self.out_dir / STATES_FILE, "w", encoding="utf-8") as states_fh:
                self._messages_fh = messages_fh

                def make_client() -> FleetClient:
                    c = FleetClient("127.0.0.1", server.port, on_message=self._log_message)
                    clients.append(c)
                    return c

                admin = make_client()
                for vin in scenario.whitelist:
                    admin.put_whitelist(vin, True)
                for vin, set_id in scenario.assignments.items():
                    admin.put_assignment(vin, set_id)

                agents = [
                    VehicleAgent(entry, scenario, index=i,
                                 client=make_client() if entry.role == "cav" else None,
                                 rng=rng)
                    for i, entry in enumerate(scenario.fleet)
                ]

                ticks = round(scenario.duration / scenario.dt)
                wall_start = time.monotonic()
                for k in range(ticks):
                    self.now = k * scenario.dt
                    clock.set(self.now)
                    senses = self._sense(agents, k)
                    for agent, (gap_m, lead_speed, _lead_vin) in zip(agents, senses):
                        agent.flush_outbox(self.now)
                        agent.poll(self.now)
                        agent.decide(self.now, gap_m, lead_speed)
                    for agent in agents:
                        agent.emit_observations(self.now)
                    if k % scenario.state_log_every == 0:
                        line = {"t": self.now, "vehicles": [a.state_sample(self.now) for a in agents]}
                        states_fh.write(json.dumps(line, separators=(",", ":")) + "\n")
                    for agent in agents:
                        agent.commit(scenario.dt)
                    if self.pace > 0.0:
                        lag = (k + 1) * scenario.dt / self.pace - (time.monotonic() - wall_start)
                        if lag > 0:
                            time.sleep(lag)
        except (ConnectionError, OSError) as exc:
            raise RunAborted(f"fleet server unreachable: {exc}") from exc
        finally:
            for c in clients:
                c.close()
            server.stop()

        self._write_integrity()
        return RunLog(
            out_dir=self.out_dir,
            scenario_hash=snapshot["scenario_hash"],
            ticks=round(scenario.duration / scenario.dt),
            messages=self._message_count,
        )

    # -------------------------------------------------------------- sensing

    def _sense(self, agents: list[VehicleAgent], tick: int) -> list[tuple]:
        """Nearest leader per vehicle: same route-lane by arc, or same
        mainline heading-lane across routes by marker. Aborts on contact."""
        vehicle_length = self.scenario.driver.vehicle_length
        by_route_lane: dict[tuple, list[tuple[float, int]]] = {}
        by_heading_lane: dict[tuple, list[tuple[float, int]]] = {}
        snap = []
        for i, agent in enumerate(agents):
            pos = agent.state.pos
            heading = pos.heading
            snap.append((pos.arc_s, pos.mile_marker, heading, agent.state.speed))
            by_route_lane.setdefault((pos.route_id, pos.lane), []).append((pos.arc_s, i))
            if heading in (Heading.WESTBOUND, Heading.EASTBOUND):
                by_heading_lane.setdefault((heading, pos.lane), []).append((pos.mile_marker, i))
        for group in by_route_lane.values():
            group.sort()
        for group in by_heading_lane.values():
            group.sort()

        senses = []
        for i, agent in enumerate(agents):
            arc, mm, heading, _speed = snap[i]
            pos = agent.state.pos
            best_d = math.inf
            best_j = None

            group = by_route_lane[(pos.route_id, pos.lane)]
            if len(group) > 1:
                arcs = [a for a, _ in group]
                idx = bisect.bisect_right(arcs, arc)
                # skip over entries at identical arc that are this vehicle
                for probe in range(idx, idx + len(group)):
                    a, j = group[probe % len(group)]
                    if j == i:
                        continue
                    d = (a - arc) % agent.route.total_cycle_mi
                    if d < best_d:
                        best_d, best_j = d, j
                    break

            if heading in (Heading.WESTBOUND, Heading.EASTBOUND):
                group = by_heading_lane[(heading, pos.lane)]
                if len(group) > 1:
                    markers = [m for m, _ in group]
                    if heading is Heading.WESTBOUND:
                        idx = bisect.bisect_left(markers, mm) - 1
                        while idx >= 0 and group[idx][1] == i:
                            idx -= 1
                        if idx >= 0:
                            d = mm - group[idx][0]
                            if d < best_d:
                                best_d, best_j = d, group[idx][1]
                    else:
                        idx = bisect.bisect_right(markers, mm)
                        while idx < len(group) and group[idx][1] == i:
                            idx += 1
                        if idx < len(group):
                            d = group[idx][0] - mm
                            if d < best_d:
                                best_d, best_j = d, group[idx][1]

            if best_j is None:
                senses.append((math.inf, None, None))
                continue
            gap_m = best_d * METERS_PER_MILE - vehicle_length
            if gap_m <= 0.0:
                raise RunAborted(
                    f"collision at tick {tick} (t={tick * self.scenario.dt:.1f}s): "
                    f"{agent.vin} into {agents[best_j].vin} (gap {gap_m:.2f} m)"
                )
            senses.append((gap_m, snap[best_j][3], agents[best_j].vin))
        return senses

    # ------------------------------------------------------------ integrity

    def _write_integrity(self) -> None:
        hashes = {}
        for name in (SCENARIO_SNAPSHOT, MESSAGES_FILE, STATES_FILE):
            digest = hashlib.sha256((self.out_dir / name).read_bytes()).hexdigest()
            hashes[name] = digest
        combined = hashlib.sha256(
            "".join(f"{k}:{v}\n" for k, v in sorted(hashes.items())).encode()
        ).hexdigest()
        payload = {"algorithm": "sha256", "files": hashes, "combined": combined}
        (self.out_dir / INTEGRITY_FILE).write_text(
            json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )


def run(scenario: ScenarioConfig, out_dir: str | Path, port: int | None = None,
        pace: float = 0.0) -> RunLog:
    """Execute a scenario and return the run-log handle."""
    return SimulationRun(scenario, out_dir, port=port, pace=pace).execute()
