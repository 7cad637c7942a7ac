"""Reconstruct analytics inputs from a run-log directory, with integrity checks.

Telemetry streams come back out of the wire-message log exactly as the server
saw them; per-vehicle state streams come from the state log (these carry the
commanded speed, which the 1 Hz telemetry does not).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..messages import TelemetryRecord
from .simulate import INTEGRITY_FILE, MESSAGES_FILE, SCENARIO_SNAPSHOT, STATES_FILE


class IntegrityError(RuntimeError):
    """The run log does not match its recorded hashes."""


@dataclass
class ReplayData:
    scenario: dict
    scenario_hash: str
    telemetry: dict[str, list[TelemetryRecord]] = field(default_factory=dict)
    states: list[dict] = field(default_factory=list)
    messages: list[dict] = field(default_factory=list)

    def telemetry_streams(self) -> list[list[TelemetryRecord]]:
        return [self.telemetry[vin] for vin in sorted(self.telemetry)]

    def state_streams(self) -> list[list[dict]]:
        """Per-vehicle state samples shaped for trajectory plotting."""
        per_vin: dict[str, list[dict]] = {}
        for line in self.states:
            t = line["t"]
            for v in line["vehicles"]:
                per_vin.setdefault(v["vin"], []).append(
                    {
                        "vin": v["vin"],
                        "t": t,
                        "mile_marker": v["mile_marker"],
                        "control_engaged": v["mode"] == "experimental",
                        "commanded_speed": v["commanded_speed"],
                        "speed": v["speed"],
                    }
                )
        return [per_vin[vin] for vin in sorted(per_vin)]


def verify_integrity(log_dir: str | Path) -> dict:
    log_dir = Path(log_dir)
    integrity_path = log_dir / INTEGRITY_FILE
    if not integrity_path.exists():
        raise IntegrityError(f"{integrity_path} is missing")
    manifest = json.loads(integrity_path.read_text())
    for name, recorded in manifest["files"].items():
        path = log_dir / name
        if not path.exists():
            raise IntegrityError(f"{name} is missing from {log_dir}")
        actual = hashlib.sha256(path.read_bytes()).hexdigest()
        if actual != recorded:
            raise IntegrityError(f"{name} does not match its recorded hash")
    return manifest


def replay(log_dir: str | Path) -> ReplayData:
    """Verify and load a run log; raises IntegrityError on any mismatch."""
    log_dir = Path(log_dir)
    verify_integrity(log_dir)

    snapshot = json.loads((log_dir / SCENARIO_SNAPSHOT).read_text())
    data = ReplayData(scenario=snapshot["scenario"], scenario_hash=snapshot["scenario_hash"])

    with open(log_dir / MESSAGES_FILE, encoding="utf-8") as fh:
        for line in fh:
            msg = json.loads(line)
            data.messages.append(msg)
            if msg["method"] == "POST" and msg["path"] == "/telemetry" and msg["status"] == 200:
                rec = TelemetryRecord.from_dict(msg["body"])
                data.telemetry.setdefault(rec.vin, []).append(rec)

    with open(log_dir / STATES_FILE, encoding="utf-8") as fh:
        data.states = [json.loads(line) for line in fh]
    return data
