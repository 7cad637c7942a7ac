"""Scenario files: geometry, fleet composition, controller tuning, timings.

A scenario is one YAML document. Fleet membership can be written as explicit
entries or as ``fleet_groups`` that expand deterministically (VINs by prefix
and index, lanes and routes round-robin). Vehicles without an explicit
``arc_s`` are placed evenly around their (route, lane) bucket, so mixed groups
on the same lane interleave without overlapping.

Everything random in resolution (position jitter, speed jitter) comes from a
generator seeded by the scenario seed, so loading the same file always yields
the same resolved scenario; its canonical JSON form is hashed into the run
log.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ..dynamics import (
    ACC_PRESETS,
    HumanDriverParams,
    SmoothingParams,
    StockAccParams,
    idm_equilibrium_speed,
)
from ..road import Corridor, LoopRoute, METERS_PER_MILE


@dataclass(frozen=True)
class ProtocolTimings:
    telemetry_period: float = 1.0
    health_period: float = 12.0
    heartbeat_period: float = 0.1
    relay_query_period: float = 1.0
    relay_publish_period: float = 1.0
    heartbeat_timeout: float = 0.5
    command_timeout: float = 0.5

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"timing {name} must be > 0, got {value}")


@dataclass(frozen=True)
class NetworkModel:
    drop_prob: float = 0.0
    latency_s: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must be in [0, 1)")
        if self.latency_s < 0:
            raise ValueError("latency_s must be >= 0")


@dataclass(frozen=True)
class OperatorPolicy:
    """When the human operator elects to engage the experimental system."""

    mode: str = "westbound_only"  # or "always"
    disengage_margin_mi: float = 0.15

    def __post_init__(self) -> None:
        if self.mode not in ("westbound_only", "always"):
            raise ValueError(f"unknown operator mode {self.mode!r}")


@dataclass(frozen=True)
class ServerTuning:
    staleness_threshold_s: float = 5.0
    low_battery_v: float = 11.1
    relay_ttl_s: float = 60.0


@dataclass(frozen=True)
class VersionSet:
    set_id: str
    hashes: tuple[tuple[str, str], ...]
    controller: SmoothingParams


@dataclass(frozen=True)
class FleetEntry:
    vin: str
    role: str  # "human" | "cav"
    lane: int
    route_id: str
    arc_s: float
    initial_speed: float
    set_speed: float


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    dt: float
    duration: float
    corridor: Corridor
    routes: dict[str, LoopRoute]
    timings: ProtocolTimings = ProtocolTimings()
    network: NetworkModel = NetworkModel()
    driver: HumanDriverParams = HumanDriverParams()
    accel_noise: float = 0.0
    acc: StockAccParams = StockAccParams()
    operator: OperatorPolicy = OperatorPolicy()
    server: ServerTuning = ServerTuning()
    relay_publish_westbound_only: bool = True
    version_sets: dict[str, VersionSet] = field(default_factory=dict)
    whitelist: list[str] = field(default_factory=list)
    assignments: dict[str, str] = field(default_factory=dict)
    fleet: list[FleetEntry] = field(default_factory=list)
    state_log_every: int = 1

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if self.state_log_every < 1:
            raise ValueError("state_log_every must be >= 1")
        vins = [e.vin for e in self.fleet]
        if len(set(vins)) != len(vins):
            raise ValueError("fleet VINs must be unique")
        for e in self.fleet:
            if e.route_id not in self.routes:
                raise ValueError(f"{e.vin}: route {e.route_id!r} is not defined")
            if not 1 <= e.lane <= self.corridor.lane_count:
                raise ValueError(f"{e.vin}: lane {e.lane} outside corridor lanes")
            if e.role == "cav" and e.lane > self.corridor.controlled_lanes:
                raise ValueError(
                    f"{e.vin}: controlled vehicles stay within the "
                    f"{self.corridor.controlled_lanes} controlled lanes"
                )
            if e.role not in ("human", "cav"):
                raise ValueError(f"{e.vin}: unknown role {e.role!r}")
        for route in self.routes.values():
            route.validate_within(self.corridor)
        if "default" not in self.version_sets:
            self.version_sets = {"default": _make_version_set("default", ["control-stack", "bridge-fw"], {}),
                                 **self.version_sets}
        for vin, set_id in self.assignments.items():
            if set_id not in self.version_sets:
                raise ValueError(f"assignment for {vin}: unknown version set {set_id!r}")

    @property
    def cav_vins(self) -> list[str]:
        return [e.vin for e in self.fleet if e.role == "cav"]

    def controller_params_for(self, vin: str) -> SmoothingParams:
        set_id = self.assignments.get(vin, "default")
        return self.version_sets[set_id].controller

    def canonical_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "dt": self.dt,
            "duration": self.duration,
            "state_log_every": self.state_log_every,
            "corridor": asdict(self.corridor),
            "routes": {rid: asdict(r) for rid, r in sorted(self.routes.items())},
            "timings": asdict(self.timings),
            "network": asdict(self.network),
            "driver": asdict(self.driver),
            "accel_noise": self.accel_noise,
            "acc": asdict(self.acc),
            "operator": asdict(self.operator),
            "server": asdict(self.server),
            "relay_publish_westbound_only": self.relay_publish_westbound_only,
            "version_sets": {
                sid: {"hashes": [list(p) for p in vs.hashes], "controller": asdict(vs.controller)}
                for sid, vs in sorted(self.version_sets.items())
            },
            "whitelist": list(self.whitelist),
            "assignments": dict(sorted(self.assignments.items())),
            "fleet": [asdict(e) for e in self.fleet],
        }

    def scenario_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _make_version_set(set_id: str, repos: list[str], controller_overrides: dict) -> VersionSet:
    hashes = tuple(
        (repo, hashlib.sha1(f"{set_id}/{repo}".encode()).hexdigest()[:12]) for repo in repos
    )
    return VersionSet(set_id=set_id, hashes=hashes, controller=SmoothingParams(**controller_overrides))


def _expand_fleet(doc: dict, routes: dict[str, LoopRoute], driver: HumanDriverParams,
                  rng: np.random.Generator) -> list[FleetEntry]:
    raw: list[dict] = []
    for entry in doc.get("fleet", []) or []:
        raw.append(dict(entry))
    for group in doc.get("fleet_groups", []) or []:
        count = int(group["count"])
        lanes = group.get("lanes") or [group.get("lane", 1)]
        group_routes = group.get("routes") or [group["route"]]
        for i in range(count):
            raw.append(
                {
                    "vin": f"{group['prefix']}{i:03d}",
                    "role": group["role"],
                    "lane": int(lanes[i % len(lanes)]),
                    "route": group_routes[(i // len(lanes)) % len(group_routes)],
                    "initial_speed": group.get("initial_speed", 25.0),
                    "speed_jitter": group.get("speed_jitter", 0.0),
                    "arc_jitter_mi": group.get("arc_jitter_mi", 0.0),
                    "set_speed": group.get("set_speed", 28.0),
                }
            )

    # even placement per (route, lane) bucket for entries without explicit arc_s
    buckets: dict[tuple[str, int], list[int]] = {}
    for idx, entry in enumerate(raw):
        if "arc_s" not in entry:
            buckets.setdefault((entry["route"], entry["lane"]), []).append(idx)
    placements: dict[int, float] = {}
    for (route_id, lane), members in buckets.items():
        cycle = routes[route_id].total_cycle_mi
        spacing = cycle / len(members)
        # stable per-bucket phase so co-lane buckets of different routes do
        # not start with vehicles at the exact same marker
        phase = (zlib.crc32(f"{route_id}:{lane}".encode()) % 1000) / 1000.0 * spacing
        for k, idx in enumerate(members):
            jitter = raw[idx].get("arc_jitter_mi", 0.0)
            offset = float(rng.uniform(-jitter, jitter)) if jitter else 0.0
            placements[idx] = (phase + k * spacing + offset) % cycle
        # bucket equilibrium speed, used when initial_speed == "equilibrium"
        gap_m = spacing * METERS_PER_MILE - driver.vehicle_length
        for idx in members:
            if raw[idx].get("initial_speed") == "equilibrium":
                raw[idx]["initial_speed"] = idm_equilibrium_speed(max(gap_m, driver.s0 * 1.01), driver)

    entries = []
    for idx, entry in enumerate(raw):
        speed = entry.get("initial_speed", 25.0)
        if speed == "equilibrium":
            raise ValueError(f"{entry['vin']}: equilibrium speed needs auto placement")
        jitter = entry.get("speed_jitter", 0.0)
        if jitter:
            speed = max(0.0, float(speed) + float(rng.normal(0.0, jitter)))
        entries.append(
            FleetEntry(
                vin=str(entry["vin"]),
                role=str(entry["role"]),
                lane=int(entry["lane"]),
                route_id=str(entry["route"]),
                arc_s=float(entry.get("arc_s", placements.get(idx, 0.0))),
                initial_speed=float(speed),
                set_speed=float(entry.get("set_speed", 28.0)),
            )
        )
    return entries


def build_scenario(doc: dict) -> ScenarioConfig:
    """Resolve a parsed scenario document into a ScenarioConfig."""
    corridor = Corridor(**(doc.get("corridor") or {}))
    routes = {
        rid: LoopRoute(route_id=rid, **spec) for rid, spec in (doc.get("routes") or {}).items()
    }
    driver = HumanDriverParams(**(doc.get("driver") or {}))

    acc_spec = dict(doc.get("acc") or {})
    preset = acc_spec.pop("preset", None)
    base = asdict(ACC_PRESETS[preset]) if preset else asdict(StockAccParams())
    base.update(acc_spec)
    acc = StockAccParams(**base)

    version_sets = {}
    for set_id, spec in (doc.get("version_sets") or {}).items():
        version_sets[set_id] = _make_version_set(
            set_id, list(spec.get("repos", ["control-stack"])), dict(spec.get("controller", {}))
        )

    seed = int(doc.get("seed", 0))
    resolve_rng = np.random.default_rng([seed, 0])
    fleet = _expand_fleet(doc, routes, driver, resolve_rng)

    wl_spec = doc.get("whitelist", [])
    if wl_spec == "all_cavs":
        whitelist = [e.vin for e in fleet if e.role == "cav"]
    else:
        whitelist = [str(v) for v in (wl_spec or [])]

    assign_spec = doc.get("assignments") or {}
    if "ab_split" in assign_spec:
        sets = list(assign_spec["ab_split"])
        assignments = {
            vin: sets[i % len(sets)]
            for i, vin in enumerate(e.vin for e in fleet if e.role == "cav")
        }
    else:
        assignments = {str(k): str(v) for k, v in assign_spec.items()}

    return ScenarioConfig(
        name=str(doc.get("name", "scenario")),
        seed=seed,
        dt=float(doc.get("dt", 0.1)),
        duration=float(doc.get("duration", 60.0)),
        corridor=corridor,
        routes=routes,
        timings=ProtocolTimings(**(doc.get("timings") or {})),
        network=NetworkModel(**(doc.get("network") or {})),
        driver=driver,
        accel_noise=float(doc.get("accel_noise", 0.0)),
        acc=acc,
        operator=OperatorPolicy(**(doc.get("operator") or {})),
        server=ServerTuning(**(doc.get("server") or {})),
        relay_publish_westbound_only=bool(doc.get("relay_publish_westbound_only", True)),
        version_sets=version_sets,
        whitelist=whitelist,
        assignments=assignments,
        fleet=fleet,
        state_log_every=int(doc.get("state_log_every", 1)),
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"scenario file {path} must hold a mapping")
    return build_scenario(doc)


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (``ring``, ``corridor``)."""
    candidate = resources.files("fleetsim") / "scenarios" / f"{name}.yaml"
    with resources.as_file(candidate) as path:
        if not path.exists():
            raise FileNotFoundError(f"no bundled scenario named {name!r}")
        return Path(path)
