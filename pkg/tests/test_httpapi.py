import pytest

from fleetsim.server import ApiError, FleetClient, FleetHttpServer, FleetState, ServerConfig, SimClock


@pytest.fixture
def wire():
    clock = SimClock()
    cfg = ServerConfig(
        version_sets={
            "default": (("control-stack", "baseline000"),),
            "set_a": (("control-stack", "aaa111"),),
        }
    )
    state = FleetState(cfg, clock)
    server = FleetHttpServer(state).start()
    client = FleetClient("127.0.0.1", server.port)
    yield clock, state, client
    client.close()
    server.stop()


def tel_body(vin="V1", t=0.0, mm=2.0, lane=1, engaged=True, wb=True):
    return {
        "vin": vin, "t": t, "mile_marker": mm, "lane": lane,
        "speed": 25.0, "accel": 0.1, "control_engaged": engaged, "westbound": wb,
    }


def health_body(vin="V1", t=0.0, volts=12.6):
    return {
        "vin": vin, "t": t, "battery_voltage": volts,
        "software_version_hashes": [["control-stack", "baseline000"]],
        "uptime": 33.0, "recording": True,
    }


class TestEndpointRoundTrips:
    def test_telemetry(self, wire):
        _, state, client = wire
        ack = client.post_telemetry(tel_body(t=1.0))
        assert ack == {"ok": True, "stale": False}
        ack = client.post_telemetry(tel_body(t=0.5))
        assert ack["stale"] is True
        assert state.telemetry_count == 2

    def test_telemetry_malformed_400(self, wire):
        _, _, client = wire
        status, obj = client.request("POST", "/telemetry", {"vin": "V1"})
        assert status == 400 and "error" in obj

    def test_health(self, wire):
        _, _, client = wire
        ack = client.post_health(health_body(volts=10.0))
        assert ack["low_battery"] is True and ack["version_mismatch"] is False

    def test_heartbeat_carries_verdict(self, wire):
        clock, _, client = wire
        ack = client.post_heartbeat("V1", 0.0)
        assert ack == {"ok": True, "whitelisted": False, "allowed": False}
        client.put_whitelist("V1", True)
        ack = client.post_heartbeat("V1", 0.0)
        assert ack["whitelisted"] is True and ack["allowed"] is True

    def test_heartbeat_regression_400(self, wire):
        _, _, client = wire
        client.post_heartbeat("V1", 5.0)
        status, obj = client.request("POST", "/heartbeat", {"vin": "V1", "t": 4.0})
        assert status == 400

    def test_fleet(self, wire):
        clock, _, client = wire
        assert client.get_fleet()["vehicles"] == []
        client.post_telemetry(tel_body(t=0.0))
        clock.set(1.0)
        snap = client.get_fleet()
        [entry] = snap["vehicles"]
        assert entry["vin"] == "V1" and entry["staleness"] == 1.0
        assert snap["testbed"] == {"start_mm": 0.0, "end_mm": 5.0}

    def test_whitelist_get_put(self, wire):
        _, _, client = wire
        assert client.get_whitelist("V2") is False
        client.put_whitelist("V2", True)
        assert client.get_whitelist("V2") is True

    def test_relay_publish_and_query(self, wire):
        _, _, client = wire
        client.post_relay({"source_vin": "V1", "t": 0.0, "mile_marker": 2.0, "lane": 1, "speed": 20.0})
        found = client.get_relay(1.9, 2.1, max_age=10.0)
        assert len(found) == 1 and found[0]["mile_marker"] == 2.0
        assert client.get_relay(3.0, 4.0, max_age=10.0) == []

    def test_relay_bad_query_400(self, wire):
        _, _, client = wire
        status, _ = client.request("GET", "/relay?mm_lo=3&mm_hi=2&max_age=5")
        assert status == 400
        status, _ = client.request("GET", "/relay?mm_lo=1")
        assert status == 400

    def test_assignment_get_put(self, wire):
        _, _, client = wire
        assert client.get_assignment("V1")["version_set_id"] == "default"
        client.put_assignment("V1", "set_a")
        got = client.get_assignment("V1")
        assert got["version_set_id"] == "set_a"
        assert got["hashes"] == [["control-stack", "aaa111"]]

    def test_assignment_unknown_set_400(self, wire):
        _, _, client = wire
        with pytest.raises(ApiError) as err:
            client.put_assignment("V1", "nope")
        assert err.value.status == 400

    def test_unknown_path_404(self, wire):
        _, _, client = wire
        status, _ = client.request("GET", "/nope")
        assert status == 404
        status, _ = client.request("POST", "/nope", {})
        assert status == 404

    def test_cors_headers_present(self, wire):
        _, _, client = wire
        client._conn.request("OPTIONS", "/fleet")
        resp = client._conn.getresponse()
        resp.read()
        assert resp.status == 204
        assert resp.headers["Access-Control-Allow-Origin"] == "*"
        assert "PUT" in resp.headers["Access-Control-Allow-Methods"]


class TestMessageHook:
    def test_hook_sees_all_traffic(self, wire):
        _, _, client = wire
        seen = []
        client.on_message = lambda *args: seen.append(args)
        client.put_whitelist("V1", True)
        client.get_whitelist("V1")
        assert [(m, p) for m, p, *_ in seen] == [("PUT", "/whitelist/V1"), ("GET", "/whitelist/V1")]
        assert seen[0][3] == 200
