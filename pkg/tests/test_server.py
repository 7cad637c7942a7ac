import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetsim.messages import HealthReport, MalformedRecord, RelayMeasurement, TelemetryRecord
from fleetsim.server import (
    FleetState,
    HeartbeatRegression,
    ServerConfig,
    SimClock,
)


def tel(vin="V1", t=0.0, mm=2.0, lane=1, speed=25.0, accel=0.0, engaged=False, wb=True):
    return TelemetryRecord(
        vin=vin, t=t, mile_marker=mm, lane=lane, speed=speed, accel=accel,
        control_engaged=engaged, westbound=wb,
    )


def health(vin="V1", t=0.0, volts=12.6, hashes=(("control-stack", "baseline000"), ("bridge-fw", "baseline000")),
           uptime=10.0, recording=True):
    return HealthReport(
        vin=vin, t=t, battery_voltage=volts, software_version_hashes=tuple(hashes),
        uptime=uptime, recording=recording,
    )


@pytest.fixture
def state():
    return FleetState(ServerConfig(), SimClock())


class TestTelemetryIngest:
    def test_first_record_indexed(self, state):
        assert state.ingest_telemetry(tel(t=1.0)) is False
        assert state.latest_telemetry()["V1"].t == 1.0

    def test_stale_record_logged_not_indexed(self, state):
        state.ingest_telemetry(tel(t=5.0))
        assert state.ingest_telemetry(tel(t=4.0)) is True
        assert state.latest_telemetry()["V1"].t == 5.0
        assert state.telemetry_count == 2

    def test_equal_timestamp_is_stale(self, state):
        state.ingest_telemetry(tel(t=5.0))
        assert state.ingest_telemetry(tel(t=5.0)) is True

    def test_counting_100_vins_60_records(self, state):
        for i in range(100):
            for k in range(60):
                state.ingest_telemetry(tel(vin=f"V{i:03d}", t=float(k)))
        assert len(state.latest_telemetry()) == 100
        assert state.telemetry_count == 6000

    def test_malformed_rejected(self):
        with pytest.raises(MalformedRecord):
            TelemetryRecord.from_dict({"vin": "V1", "t": 0.0})
        with pytest.raises(MalformedRecord):
            TelemetryRecord.from_dict(tel(speed=1.0).to_dict() | {"speed": -1.0})
        with pytest.raises(MalformedRecord):
            TelemetryRecord.from_dict(tel().to_dict() | {"westbound": "yes"})


class TestFleetSnapshot:
    def test_empty(self, state):
        assert state.fleet_snapshot()["vehicles"] == []

    def test_fresh_whitelisted_allows(self, state):
        state.clock.set(10.0)
        state.ingest_telemetry(tel(t=10.0))
        state.set_whitelist("V1", True)
        state.record_heartbeat("V1", 10.0)
        [entry] = state.fleet_snapshot()["vehicles"]
        assert entry["allow"] is True
        assert entry["stale"] is False

    def test_silent_vin_flagged_stale(self, state):
        state.ingest_telemetry(tel(t=0.0))
        threshold = state.config.staleness_threshold_s
        state.clock.set(threshold + 0.5)
        [entry] = state.fleet_snapshot()["vehicles"]
        assert entry["staleness"] == pytest.approx(threshold + 0.5)
        assert entry["stale"] is True

    def test_turnaround_sample_not_on_testbed(self, state):
        state.ingest_telemetry(tel(lane=0, mm=2.0))
        [entry] = state.fleet_snapshot()["vehicles"]
        assert entry["on_testbed"] is False


class TestWhitelist:
    def test_round_trip(self, state):
        state.set_whitelist("V9", True)
        assert state.get_whitelist("V9") is True
        state.set_whitelist("V9", False)
        assert state.get_whitelist("V9") is False

    def test_deny_by_default(self, state):
        assert state.get_whitelist("NEVER_SEEN") is False
        assert state.control_allowed("NEVER_SEEN", now=0.0) is False


class TestHeartbeat:
    def test_no_heartbeat_not_allowed(self, state):
        state.set_whitelist("V1", True)
        assert state.control_allowed("V1", now=0.0) is False

    def test_boundary_both_sides(self, state):
        timeout = state.config.heartbeat_timeout_s
        state.set_whitelist("V1", True)
        state.record_heartbeat("V1", 100.0)
        assert state.control_allowed("V1", now=100.0 + timeout) is True
        assert state.control_allowed("V1", now=100.0 + timeout + 1e-9) is False

    def test_unwhitelisted_fresh_heartbeat_denied(self, state):
        state.record_heartbeat("V1", 0.0)
        assert state.control_allowed("V1", now=0.0) is False

    def test_regressing_heartbeat_rejected(self, state):
        state.record_heartbeat("V1", 5.0)
        with pytest.raises(HeartbeatRegression):
            state.record_heartbeat("V1", 4.0)

    @given(offsets=st.lists(st.floats(0.0, 3.0), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_allowed_non_increasing_between_heartbeats(self, offsets):
        state = FleetState(ServerConfig(), SimClock())
        state.set_whitelist("V1", True)
        state.record_heartbeat("V1", 0.0)
        values = [state.control_allowed("V1", now=t) for t in sorted(offsets)]
        assert values == sorted(values, reverse=True)


class TestRelay:
    def meas(self, mm, t=0.0, vin="S", lane=1, speed=20.0):
        return RelayMeasurement(source_vin=vin, t=t, mile_marker=mm, lane=lane, speed=speed)

    def test_publish_then_window_query(self, state):
        state.publish_measurement(self.meas(2.0))
        found = state.query_measurements(1.9, 2.1, max_age=10.0, now=1.0)
        assert [m.mile_marker for m in found] == [2.0]

    def test_expired_excluded(self, state):
        state.publish_measurement(self.meas(2.0, t=0.0))
        assert state.query_measurements(0.0, 5.0, max_age=3.0, now=3.1) == []

    def test_ttl_prunes_storage(self):
        state = FleetState(ServerConfig(relay_ttl_s=5.0), SimClock())
        state.publish_measurement(self.meas(2.0, t=0.0))
        state.clock.set(6.0)
        state.publish_measurement(self.meas(3.0, t=6.0))
        assert len(state._relay) == 1

    def test_inverted_range_rejected(self, state):
        with pytest.raises(ValueError):
            state.query_measurements(3.0, 2.0, max_age=1.0, now=0.0)
        with pytest.raises(ValueError):
            state.query_measurements(2.0, 3.0, max_age=0.0, now=0.0)

    def test_thousand_random_vs_brute_force(self):
        import numpy as np

        rng = np.random.default_rng(11)
        state = FleetState(ServerConfig(relay_ttl_s=1e9), SimClock())
        published = []
        for i in range(1000):
            m = self.meas(
                mm=float(rng.uniform(0, 5)),
                t=float(rng.uniform(0, 100)),
                vin=f"S{i % 17}",
                lane=int(rng.integers(1, 5)),
                speed=float(rng.uniform(0, 35)),
            )
            published.append(m)
            state.publish_measurement(m)
        for _ in range(50):
            lo = float(rng.uniform(0, 5))
            hi = float(rng.uniform(lo, 5))
            age = float(rng.uniform(1, 120))
            now = float(rng.uniform(50, 150))
            got = state.query_measurements(lo, hi, max_age=age, now=now)
            want = [m for m in published if lo <= m.mile_marker <= hi and now - m.t <= age]
            assert sorted(got, key=lambda m: (m.t, m.mile_marker, m.source_vin)) == sorted(
                want, key=lambda m: (m.t, m.mile_marker, m.source_vin)
            )


class TestVersions:
    def cfg(self):
        return ServerConfig(
            version_sets={
                "default": (("control-stack", "baseline000"),),
                "set_a": (("control-stack", "aaa111"),),
                "set_b": (("control-stack", "bbb222"),),
            }
        )

    def test_unassigned_gets_default(self):
        state = FleetState(self.cfg(), SimClock())
        assert state.get_assignment("V1").version_set_id == "default"

    def test_reassign_returns_latest(self):
        state = FleetState(self.cfg(), SimClock())
        state.assign_version("V1", "set_a")
        state.assign_version("V1", "set_b")
        assert state.get_assignment("V1").version_set_id == "set_b"

    def test_unknown_set_rejected(self):
        state = FleetState(self.cfg(), SimClock())
        with pytest.raises(ValueError):
            state.assign_version("V1", "nope")

    def test_ab_partition_visible_in_snapshot(self):
        state = FleetState(self.cfg(), SimClock())
        for i in range(10):
            vin = f"V{i}"
            state.ingest_telemetry(tel(vin=vin))
            state.assign_version(vin, "set_a" if i < 5 else "set_b")
        snap = state.fleet_snapshot()
        by_set = {}
        for entry in snap["vehicles"]:
            by_set.setdefault(entry["version_set_id"], []).append(entry["vin"])
        assert len(by_set["set_a"]) == 5 and len(by_set["set_b"]) == 5


class TestHealth:
    def test_nominal_voltage(self, state):
        low, mismatch = state.ingest_health(health(volts=12.6))
        assert low is False and mismatch is False

    def test_low_battery_flagged(self, state):
        low, _ = state.ingest_health(health(volts=10.0))
        assert low is True
        state.ingest_telemetry(tel())
        [entry] = state.fleet_snapshot()["vehicles"]
        assert entry["low_battery"] is True

    def test_version_mismatch_flagged(self, state):
        _, mismatch = state.ingest_health(health(hashes=(("control-stack", "rogue999"),)))
        assert mismatch is True
        state.ingest_telemetry(tel())
        [entry] = state.fleet_snapshot()["vehicles"]
        assert entry["version_mismatch"] is True

    def test_malformed_rejected(self):
        with pytest.raises(MalformedRecord):
            HealthReport.from_dict(health().to_dict() | {"battery_voltage": 0.0})


class TestDurableLog:
    def test_fold_reconstructs_state(self, tmp_path, state_dir=None):
        cfg = ServerConfig(
            version_sets={"default": (("control-stack", "baseline000"),), "set_a": (("control-stack", "a1"),)}
        )
        first = FleetState(cfg, SimClock(), log_dir=tmp_path)
        first.ingest_telemetry(tel(vin="V1", t=1.0))
        first.ingest_telemetry(tel(vin="V1", t=0.5))  # stale
        first.ingest_telemetry(tel(vin="V2", t=2.0))
        first.ingest_health(health(vin="V1", t=1.0, volts=10.5))
        first.set_whitelist("V1", True)
        first.record_heartbeat("V1", 1.5)
        first.publish_measurement(RelayMeasurement("V1", 1.0, 2.5, 1, 20.0))
        first.assign_version("V2", "set_a")
        first.close()

        second = FleetState(cfg, SimClock(), log_dir=tmp_path)
        assert second.latest_telemetry() == first.latest_telemetry()
        assert second.telemetry_count == first.telemetry_count == 3
        assert second.latest_health() == first.latest_health()
        assert second.get_whitelist("V1") is True
        assert second.last_heartbeat("V1") == 1.5
        assert second.get_assignment("V2") == first.get_assignment("V2")
        assert second.query_measurements(0, 5, max_age=100, now=1.0) == first.query_measurements(
            0, 5, max_age=100, now=1.0
        )
        second.close()

    def test_log_is_line_delimited_tagged_json(self, tmp_path):
        state = FleetState(ServerConfig(), SimClock(), log_dir=tmp_path)
        state.ingest_telemetry(tel())
        state.set_whitelist("V1", True)
        state.close()
        lines = (tmp_path / "server_log.jsonl").read_text().strip().splitlines()
        kinds = [json.loads(line)["kind"] for line in lines]
        assert kinds == ["telemetry", "whitelist"]
