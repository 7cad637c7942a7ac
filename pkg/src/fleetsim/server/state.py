"""Server-side stores: telemetry, health, permissions, relay, versions.

All state mutations serialize through one lock per store, so concurrent
ingestion and queries see consistent per-store snapshots. Time is injected
through a clock object and never read ambiently, which keeps heartbeat
boundary behavior deterministic under test.

Persistence is an append-only line-delimited JSON log (one object per line,
tagged with a record kind); on startup the log is folded back through the
normal ingest paths to rebuild the in-memory indexes.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from ..messages import HealthReport, MalformedRecord, RelayMeasurement, TelemetryRecord, VersionAssignment

LOG_FILENAME = "server_log.jsonl"


class HeartbeatRegression(ValueError):
    """A heartbeat arrived with a timestamp earlier than the last one."""


class SimClock:
    """Externally driven clock for embedded/simulated operation."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = start

    def set(self, t: float) -> None:
        self._now = t

    def now(self) -> float:
        return self._now


class WallClock:
    """Seconds since server start, for standalone operation."""

    def __init__(self) -> None:
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0


def default_version_sets() -> dict[str, tuple[tuple[str, str], ...]]:
    return {"default": (("control-stack", "baseline000"), ("bridge-fw", "baseline000"))}


@dataclass
class ServerConfig:
    heartbeat_timeout_s: float = 0.5
    staleness_threshold_s: float = 5.0
    low_battery_v: float = 11.1
    relay_ttl_s: float = 60.0
    testbed_start_mm: float = 0.0
    testbed_end_mm: float = 5.0
    version_sets: dict[str, tuple[tuple[str, str], ...]] = field(default_factory=default_version_sets)
    default_version_set: str = "default"

    def __post_init__(self) -> None:
        if self.default_version_set not in self.version_sets:
            self.version_sets = {**default_version_sets(), **self.version_sets}


class FleetState:
    """All server stores plus the optional durable log."""

    def __init__(self, config: ServerConfig | None = None, clock=None, log_dir: str | Path | None = None):
        self.config = config or ServerConfig()
        self.clock = clock or SimClock()

        self._telemetry_lock = threading.Lock()
        self._telemetry_log: list[TelemetryRecord] = []
        self._latest_telemetry: dict[str, TelemetryRecord] = {}

        self._health_lock = threading.Lock()
        self._health_count = 0
        self._latest_health: dict[str, HealthReport] = {}

        self._perm_lock = threading.Lock()
        self._whitelist: dict[str, bool] = {}
        self._last_heartbeat: dict[str, float] = {}

        self._relay_lock = threading.Lock()
        self._relay: list[RelayMeasurement] = []

        self._version_lock = threading.Lock()
        self._assignments: dict[str, str] = {}

        self._log_lock = threading.Lock()
        self._log_file = None
        if log_dir is not None:
            path = Path(log_dir) / LOG_FILENAME
            path.parent.mkdir(parents=True, exist_ok=True)
            if path.exists():
                self._fold_log(path)
            self._log_file = open(path, "a", buffering=1, encoding="utf-8")

    # ------------------------------------------------------------------ log

    def _append(self, kind: str, obj: dict[str, Any]) -> None:
        if self._log_file is None:
            return
        with self._log_lock:
            self._log_file.write(json.dumps({"kind": kind, **obj}, sort_keys=True) + "\n")

    def _fold_log(self, path: Path) -> None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                kind = obj.pop("kind")
                if kind == "telemetry":
                    self.ingest_telemetry(TelemetryRecord.from_dict(obj), _replay=True)
                elif kind == "health":
                    self.ingest_health(HealthReport.from_dict(obj), _replay=True)
                elif kind == "heartbeat":
                    self.record_heartbeat(obj["vin"], obj["t"], _replay=True)
                elif kind == "whitelist":
                    self.set_whitelist(obj["vin"], obj["whitelisted"], _replay=True)
                elif kind == "relay":
                    self.publish_measurement(RelayMeasurement.from_dict(obj), _replay=True)
                elif kind == "assignment":
                    self.assign_version(obj["vin"], obj["version_set_id"], _replay=True)
                else:
                    raise MalformedRecord(f"unknown record kind {kind!r} in durable log")

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # ------------------------------------------------------------ telemetry

    def ingest_telemetry(self, rec: TelemetryRecord, _replay: bool = False) -> bool:
        """Append to the log; update the latest index only for fresh records.

        Returns True when the record is stale (at or behind the indexed one).
        """
        with self._telemetry_lock:
            self._telemetry_log.append(rec)
            latest = self._latest_telemetry.get(rec.vin)
            stale = latest is not None and rec.t <= latest.t
            if not stale:
                self._latest_telemetry[rec.vin] = rec
        if not _replay:
            self._append("telemetry", rec.to_dict())
        return stale

    @property
    def telemetry_count(self) -> int:
        with self._telemetry_lock:
            return len(self._telemetry_log)

    def latest_telemetry(self) -> dict[str, TelemetryRecord]:
        with self._telemetry_lock:
            return dict(self._latest_telemetry)

    # --------------------------------------------------------------- health

    def ingest_health(self, rep: HealthReport, _replay: bool = False) -> tuple[bool, bool]:
        """Returns (low_battery, version_mismatch) flags for the report."""
        with self._health_lock:
            self._health_count += 1
            latest = self._latest_health.get(rep.vin)
            if latest is None or rep.t > latest.t:
                self._latest_health[rep.vin] = rep
        if not _replay:
            self._append("health", rep.to_dict())
        return self._health_flags(rep)

    def _health_flags(self, rep: HealthReport) -> tuple[bool, bool]:
        low_battery = rep.battery_voltage < self.config.low_battery_v
        assigned = self.get_assignment(rep.vin)
        mismatch = set(rep.software_version_hashes) != set(assigned.hashes)
        return low_battery, mismatch

    def latest_health(self) -> dict[str, HealthReport]:
        with self._health_lock:
            return dict(self._latest_health)

    # ---------------------------------------------------------- permissions

    def set_whitelist(self, vin: str, value: bool, _replay: bool = False) -> None:
        with self._perm_lock:
            self._whitelist[vin] = bool(value)
        if not _replay:
            self._append("whitelist", {"vin": vin, "whitelisted": bool(value)})

    def get_whitelist(self, vin: str) -> bool:
        with self._perm_lock:
            return self._whitelist.get(vin, False)

    def record_heartbeat(self, vin: str, t: float, _replay: bool = False) -> tuple[bool, bool]:
        """Record a liveness beat; returns (whitelisted, allowed) at receipt."""
        with self._perm_lock:
            prev = self._last_heartbeat.get(vin)
            if prev is not None and t < prev:
                raise HeartbeatRegression(f"heartbeat for {vin} regresses: {t} < {prev}")
            self._last_heartbeat[vin] = t
            whitelisted = self._whitelist.get(vin, False)
        if not _replay:
            self._append("heartbeat", {"vin": vin, "t": t})
        return whitelisted, self.control_allowed(vin)

    def control_allowed(self, vin: str, now: float | None = None) -> bool:
        """Whitelist conjoined with heartbeat freshness; deny by default."""
        now = self.clock.now() if now is None else now
        with self._perm_lock:
            if not self._whitelist.get(vin, False):
                return False
            last = self._last_heartbeat.get(vin)
        return last is not None and (now - last) <= self.config.heartbeat_timeout_s

    def last_heartbeat(self, vin: str) -> float | None:
        with self._perm_lock:
            return self._last_heartbeat.get(vin)

    # ---------------------------------------------------------------- relay

    def publish_measurement(self, m: RelayMeasurement, _replay: bool = False) -> None:
        now = self.clock.now()
        with self._relay_lock:
            self._relay.append(m)
            self._prune_relay(now)
        if not _replay:
            self._append("relay", m.to_dict())

    def _prune_relay(self, now: float) -> None:
        ttl = self.config.relay_ttl_s
        self._relay = [m for m in self._relay if now - m.t <= ttl]

    def query_measurements(
        self, mm_lo: float, mm_hi: float, max_age: float, now: float | None = None
    ) -> list[RelayMeasurement]:
        if mm_lo > mm_hi:
            raise ValueError(f"inverted range: mm_lo {mm_lo} > mm_hi {mm_hi}")
        if max_age <= 0:
            raise ValueError(f"max_age must be > 0, got {max_age}")
        now = self.clock.now() if now is None else now
        with self._relay_lock:
            self._prune_relay(now)
            return [
                m
                for m in self._relay
                if mm_lo <= m.mile_marker <= mm_hi and (now - m.t) <= max_age
            ]

    # -------------------------------------------------------------- versions

    def assign_version(self, vin: str, version_set_id: str, _replay: bool = False) -> None:
        if version_set_id not in self.config.version_sets:
            raise ValueError(f"unknown version_set_id {version_set_id!r}")
        with self._version_lock:
            self._assignments[vin] = version_set_id
        if not _replay:
            self._append("assignment", {"vin": vin, "version_set_id": version_set_id})

    def get_assignment(self, vin: str) -> VersionAssignment:
        with self._version_lock:
            set_id = self._assignments.get(vin, self.config.default_version_set)
        return VersionAssignment(vin=vin, version_set_id=set_id, hashes=self.config.version_sets[set_id])

    # -------------------------------------------------------------- snapshot

    def fleet_snapshot(self, now: float | None = None) -> dict[str, Any]:
        """Latest state of every reporting VIN, with verdicts and health flags."""
        now = self.clock.now() if now is None else now
        cfg = self.config
        latest = self.latest_telemetry()
        health = self.latest_health()
        vehicles = []
        for vin in sorted(latest):
            rec = latest[vin]
            staleness = now - rec.t
            on_testbed = rec.lane >= 1 and cfg.testbed_start_mm <= rec.mile_marker <= cfg.testbed_end_mm
            rep = health.get(vin)
            low_battery = rep is not None and rep.battery_voltage < cfg.low_battery_v
            assignment = self.get_assignment(vin)
            mismatch = rep is not None and set(rep.software_version_hashes) != set(assignment.hashes)
            vehicles.append(
                {
                    **rec.to_dict(),
                    "staleness": staleness,
                    "stale": staleness > cfg.staleness_threshold_s,
                    "whitelisted": self.get_whitelist(vin),
                    "allow": self.control_allowed(vin, now),
                    "on_testbed": on_testbed,
                    "engaged_westbound": bool(on_testbed and rec.westbound and rec.control_engaged),
                    "low_battery": bool(low_battery),
                    "version_mismatch": bool(mismatch),
                    "version_set_id": assignment.version_set_id,
                }
            )
        return {
            "now": now,
            "staleness_threshold": cfg.staleness_threshold_s,
            "testbed": {"start_mm": cfg.testbed_start_mm, "end_mm": cfg.testbed_end_mm},
            "vehicles": vehicles,
        }
