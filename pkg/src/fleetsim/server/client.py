"""Persistent-connection client for the fleet wire API.

One client holds one keep-alive TCP connection, which is how each simulated
vehicle (and the CLI) talks to the server. An optional ``on_message`` hook
observes every request/response pair, which the run harness uses to build the
wire-message log.
"""
from __future__ import annotations

import http.client
import json
import socket
from typing import Any, Callable, Mapping
from urllib.parse import urlencode

MessageHook = Callable[[str, str, Mapping[str, Any] | None, int, Any], None]


class ApiError(RuntimeError):
    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status
        self.message = message


class FleetClient:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 8080,
        timeout: float = 30.0,
        on_message: MessageHook | None = None,
    ) -> None:
        self.host = host
        self.port = port
        self.timeout = timeout
        self.on_message = on_message
        self._conn = http.client.HTTPConnection(host, port, timeout=timeout)

    def close(self) -> None:
        self._conn.close()

    # ------------------------------------------------------------- plumbing

    def request(self, method: str, path: str, body: Mapping[str, Any] | None = None) -> tuple[int, Any]:
        """One round-trip; returns (status, parsed JSON). Reconnects once."""
        payload = json.dumps(body) if body is not None else None
        headers = {"Content-Type": "application/json"} if payload is not None else {}
        try:
            status, obj = self._roundtrip(method, path, payload, headers)
        except (http.client.HTTPException, ConnectionError, BrokenPipeError):
            self._conn.close()
            self._conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
            status, obj = self._roundtrip(method, path, payload, headers)
        if self.on_message is not None:
            self.on_message(method, path, body, status, obj)
        return status, obj

    def _roundtrip(self, method, path, payload, headers) -> tuple[int, Any]:
        fresh = self._conn.sock is None
        self._conn.request(method, path, body=payload, headers=headers)
        if fresh and self._conn.sock is not None:
            self._conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        resp = self._conn.getresponse()
        raw = resp.read()
        obj = json.loads(raw) if raw else None
        return resp.status, obj

    def _call(self, method: str, path: str, body: Mapping[str, Any] | None = None) -> Any:
        status, obj = self.request(method, path, body)
        if status >= 400:
            message = obj.get("error", "") if isinstance(obj, dict) else str(obj)
            raise ApiError(status, message)
        return obj

    # ------------------------------------------------------------ endpoints

    def post_telemetry(self, record: Mapping[str, Any]) -> dict:
        return self._call("POST", "/telemetry", record)

    def post_health(self, report: Mapping[str, Any]) -> dict:
        return self._call("POST", "/health", report)

    def post_heartbeat(self, vin: str, t: float | None = None) -> dict:
        body: dict[str, Any] = {"vin": vin}
        if t is not None:
            body["t"] = t
        return self._call("POST", "/heartbeat", body)

    def get_fleet(self) -> dict:
        return self._call("GET", "/fleet")

    def get_whitelist(self, vin: str) -> bool:
        return self._call("GET", f"/whitelist/{vin}")["whitelisted"]

    def put_whitelist(self, vin: str, value: bool) -> dict:
        return self._call("PUT", f"/whitelist/{vin}", {"whitelisted": value})

    def post_relay(self, measurement: Mapping[str, Any]) -> dict:
        return self._call("POST", "/relay", measurement)

    def get_relay(self, mm_lo: float, mm_hi: float, max_age: float) -> list[dict]:
        query = urlencode({"mm_lo": mm_lo, "mm_hi": mm_hi, "max_age": max_age})
        return self._call("GET", f"/relay?{query}")["measurements"]

    def put_assignment(self, vin: str, version_set_id: str) -> dict:
        return self._call("PUT", f"/assignment/{vin}", {"version_set_id": version_set_id})

    def get_assignment(self, vin: str) -> dict:
        return self._call("GET", f"/assignment/{vin}")
