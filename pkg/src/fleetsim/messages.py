"""Wire record types shared by vehicles, server, and analytics.

Every record serializes to a flat JSON object whose keys match the dataclass
field names. Timestamps are seconds since the scenario epoch. ``from_dict``
validates shape and units and raises :class:`MalformedRecord` on bad input, so
the HTTP layer can map it straight to a 400.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping


class MalformedRecord(ValueError):
    """Input object does not parse as the expected wire record."""


def _require(obj: Mapping[str, Any], field: str, kinds: tuple[type, ...]) -> Any:
    if field not in obj:
        raise MalformedRecord(f"missing field {field!r}")
    value = obj[field]
    if isinstance(value, bool) and bool not in kinds:
        raise MalformedRecord(f"field {field!r} has wrong type bool")
    if not isinstance(value, kinds):
        raise MalformedRecord(f"field {field!r} has wrong type {type(value).__name__}")
    return value


def _number(obj: Mapping[str, Any], field: str) -> float:
    return float(_require(obj, field, (int, float)))


@dataclass(frozen=True)
class TelemetryRecord:
    """1 Hz live-tracking message from one fleet vehicle.

    ``lane`` is 0 while the vehicle is off the mainline (turning around at an
    exit/entrance), otherwise the 1-based mainline lane.
    """

    vin: str
    t: float
    mile_marker: float
    lane: int
    speed: float
    accel: float
    control_engaged: bool
    westbound: bool

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "TelemetryRecord":
        rec = cls(
            vin=_require(obj, "vin", (str,)),
            t=_number(obj, "t"),
            mile_marker=_number(obj, "mile_marker"),
            lane=int(_require(obj, "lane", (int,))),
            speed=_number(obj, "speed"),
            accel=_number(obj, "accel"),
            control_engaged=_require(obj, "control_engaged", (bool,)),
            westbound=_require(obj, "westbound", (bool,)),
        )
        if not rec.vin:
            raise MalformedRecord("vin must be non-empty")
        if rec.speed < 0:
            raise MalformedRecord(f"speed must be >= 0, got {rec.speed}")
        if rec.lane < 0:
            raise MalformedRecord(f"lane must be >= 0, got {rec.lane}")
        return rec


@dataclass(frozen=True)
class HealthReport:
    """Periodic self-report of one vehicle's embedded stack (nominally 12 s)."""

    vin: str
    t: float
    battery_voltage: float
    software_version_hashes: tuple[tuple[str, str], ...]
    uptime: float
    recording: bool

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["software_version_hashes"] = [list(p) for p in self.software_version_hashes]
        return d

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "HealthReport":
        raw = _require(obj, "software_version_hashes", (list, tuple))
        hashes = []
        for pair in raw:
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                raise MalformedRecord("software_version_hashes entries must be [repo, hash] pairs")
            repo, digest = pair
            if not (isinstance(repo, str) and isinstance(digest, str)):
                raise MalformedRecord("software_version_hashes entries must be string pairs")
            hashes.append((repo, digest))
        rep = cls(
            vin=_require(obj, "vin", (str,)),
            t=_number(obj, "t"),
            battery_voltage=_number(obj, "battery_voltage"),
            software_version_hashes=tuple(hashes),
            uptime=_number(obj, "uptime"),
            recording=_require(obj, "recording", (bool,)),
        )
        if not rep.vin:
            raise MalformedRecord("vin must be non-empty")
        if rep.battery_voltage <= 0:
            raise MalformedRecord(f"battery_voltage must be > 0, got {rep.battery_voltage}")
        return rep


@dataclass(frozen=True)
class RelayMeasurement:
    """Speed observation shared vehicle-to-vehicle through the server."""

    source_vin: str
    t: float
    mile_marker: float
    lane: int
    speed: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "RelayMeasurement":
        m = cls(
            source_vin=_require(obj, "source_vin", (str,)),
            t=_number(obj, "t"),
            mile_marker=_number(obj, "mile_marker"),
            lane=int(_require(obj, "lane", (int,))),
            speed=_number(obj, "speed"),
        )
        if not m.source_vin:
            raise MalformedRecord("source_vin must be non-empty")
        if m.speed < 0:
            raise MalformedRecord(f"speed must be >= 0, got {m.speed}")
        return m


@dataclass(frozen=True)
class VersionAssignment:
    """Per-VIN prescription of the software version set to run."""

    vin: str
    version_set_id: str
    hashes: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin,
            "version_set_id": self.version_set_id,
            "hashes": [list(p) for p in self.hashes],
        }
