"""HTTP/JSON wire API over the fleet stores.

Endpoints (bodies and responses are JSON; timestamps are seconds since the
scenario epoch):

    POST /telemetry                  ingest one TelemetryRecord
    POST /health                     ingest one HealthReport
    POST /heartbeat                  record liveness; response carries verdict
    GET  /fleet                      latest snapshot of every reporting VIN
    GET  /whitelist/{vin}            current whitelist bit
    PUT  /whitelist/{vin}            set whitelist bit
    POST /relay                      publish a RelayMeasurement
    GET  /relay?mm_lo&mm_hi&max_age  window query over retained measurements
    PUT  /assignment/{vin}           assign a registered version set
    GET  /assignment/{vin}           current version assignment

Responses always carry ``Access-Control-Allow-Origin: *`` so the dashboard can
be served from anywhere; an optional assets directory is exposed at ``/`` for
same-origin hosting instead.
"""
from __future__ import annotations

import json
import logging
import mimetypes
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from ..messages import HealthReport, MalformedRecord, RelayMeasurement, TelemetryRecord
from .state import FleetState, HeartbeatRegression

log = logging.getLogger(__name__)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "fleetsim"

    @property
    def state(self) -> FleetState:
        return self.server.fleet_state  # type: ignore[attr-defined]

    @property
    def assets_dir(self) -> Path | None:
        return self.server.assets_dir  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # default stderr spam is useless here
        log.debug("%s %s", self.address_string(), fmt % args)

    # ------------------------------------------------------------- plumbing

    def _send_json(self, status: int, obj) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._send_json(status, {"error": message})

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b""
        try:
            obj = json.loads(raw) if raw else {}
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"body is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise MalformedRecord("body must be a JSON object")
        return obj

    # --------------------------------------------------------------- verbs

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_POST(self):
        path = urlparse(self.path).path
        try:
            body = self._read_json()
            if path == "/telemetry":
                stale = self.state.ingest_telemetry(TelemetryRecord.from_dict(body))
                self._send_json(200, {"ok": True, "stale": stale})
            elif path == "/health":
                low_battery, mismatch = self.state.ingest_health(HealthReport.from_dict(body))
                self._send_json(200, {"ok": True, "low_battery": low_battery, "version_mismatch": mismatch})
            elif path == "/heartbeat":
                vin = body.get("vin")
                if not isinstance(vin, str) or not vin:
                    raise MalformedRecord("heartbeat requires a vin")
                t = body.get("t")
                t = self.state.clock.now() if t is None else float(t)
                whitelisted, allowed = self.state.record_heartbeat(vin, t)
                self._send_json(200, {"ok": True, "whitelisted": whitelisted, "allowed": allowed})
            elif path == "/relay":
                self.state.publish_measurement(RelayMeasurement.from_dict(body))
                self._send_json(200, {"ok": True})
            else:
                self._error(404, f"no such endpoint: POST {path}")
        except (MalformedRecord, HeartbeatRegression, ValueError, TypeError) as exc:
            self._error(400, str(exc))

    def do_PUT(self):
        path = urlparse(self.path).path
        parts = path.strip("/").split("/")
        try:
            body = self._read_json()
            if len(parts) == 2 and parts[0] == "whitelist":
                value = body.get("whitelisted")
                if not isinstance(value, bool):
                    raise MalformedRecord("body must carry boolean 'whitelisted'")
                self.state.set_whitelist(parts[1], value)
                self._send_json(200, {"ok": True, "vin": parts[1], "whitelisted": value})
            elif len(parts) == 2 and parts[0] == "assignment":
                set_id = body.get("version_set_id")
                if not isinstance(set_id, str):
                    raise MalformedRecord("body must carry string 'version_set_id'")
                self.state.assign_version(parts[1], set_id)
                self._send_json(200, {"ok": True, "vin": parts[1], "version_set_id": set_id})
            else:
                self._error(404, f"no such endpoint: PUT {path}")
        except (MalformedRecord, ValueError, TypeError) as exc:
            self._error(400, str(exc))

    def do_GET(self):
        parsed = urlparse(self.path)
        path = parsed.path
        parts = path.strip("/").split("/")
        try:
            if path == "/fleet":
                self._send_json(200, self.state.fleet_snapshot())
            elif len(parts) == 2 and parts[0] == "whitelist":
                self._send_json(200, {"vin": parts[1], "whitelisted": self.state.get_whitelist(parts[1])})
            elif len(parts) == 2 and parts[0] == "assignment":
                self._send_json(200, self.state.get_assignment(parts[1]).to_dict())
            elif path == "/relay":
                qs = parse_qs(parsed.query)
                try:
                    mm_lo = float(qs["mm_lo"][0])
                    mm_hi = float(qs["mm_hi"][0])
                    max_age = float(qs["max_age"][0])
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"relay query needs numeric mm_lo, mm_hi, max_age: {exc}") from exc
                found = self.state.query_measurements(mm_lo, mm_hi, max_age)
                self._send_json(200, {"measurements": [m.to_dict() for m in found]})
            elif self.assets_dir is not None:
                self._serve_asset(path)
            else:
                self._error(404, f"no such endpoint: GET {path}")
        except (MalformedRecord, ValueError, TypeError) as exc:
            self._error(400, str(exc))

    def _serve_asset(self, path: str) -> None:
        rel = path.lstrip("/") or "index.html"
        target = (self.assets_dir / rel).resolve()
        if not str(target).startswith(str(self.assets_dir.resolve())) or not target.is_file():
            self._error(404, f"no such file: {path}")
            return
        body = target.read_bytes()
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)


class FleetHttpServer:
    """Threaded HTTP server bound to a FleetState; ``port=0`` picks a free port."""

    def __init__(
        self,
        state: FleetState,
        host: str = "127.0.0.1",
        port: int = 0,
        assets_dir: str | Path | None = None,
    ) -> None:
        self.state = state
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.daemon_threads = True
        self._httpd.disable_nagle_algorithm = True
        self._httpd.fleet_state = state  # type: ignore[attr-defined]
        self._httpd.assets_dir = Path(assets_dir) if assets_dir else None  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self._httpd.server_address[0]

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def start(self) -> "FleetHttpServer":
        self._thread = threading.Thread(
            target=lambda: self._httpd.serve_forever(poll_interval=0.05),
            name="fleet-http",
            daemon=True,
        )
        self._thread.start()
        log.info("fleet server listening on %s:%d", self.host, self.port)
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._httpd.server_close()
        self.state.close()

    def serve_forever(self) -> None:
        log.info("fleet server listening on %s:%d", self.host, self.port)
        self._httpd.serve_forever()
