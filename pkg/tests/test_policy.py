"""Tests for metamesh.policy."""

from __future__ import annotations

import json
import socketserver
import threading
import time

import numpy as np
import pytest

from metamesh.disturbances import NULL_PUSH
from metamesh.dynamics import PASSIVE, PolicySpec, SimulationConfig, simulate_gait_cycle
from metamesh.errors import PolicyProtocolError
from metamesh.models import CompassGait
from metamesh.policy import ExternalPolicyClient, PolicyPool, external_policy_query, parse_endpoint


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            request = json.loads(line)
            self.server.requests.append(request)
            reply = self.server.reply(request)
            if reply is None:
                continue
            if isinstance(reply, float):
                time.sleep(reply)
                continue
            self.wfile.write(reply if isinstance(reply, bytes) else (json.dumps(reply) + "\n").encode())
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


@pytest.fixture
def policy_server():
    """Local line-delimited JSON server; set `server.reply` to shape replies."""
    server = _Server(("127.0.0.1", 0), _Handler)
    server.requests = []
    server.reply = lambda req: {"act": [0.0] * 1}
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    server.endpoint = f"tcp://{host}:{port}"
    yield server
    server.shutdown()
    server.server_close()


class TestParseEndpoint:
    def test_tcp(self):
        assert parse_endpoint("tcp://localhost:9000") == ("tcp", "localhost:9000")

    def test_unix(self):
        assert parse_endpoint("unix:/tmp/policy.sock") == ("unix", "/tmp/policy.sock")

    def test_stdio(self):
        assert parse_endpoint("stdio:python serve.py") == ("stdio", "python serve.py")

    def test_bad_port(self):
        with pytest.raises(ValueError, match="tcp://host:port"):
            parse_endpoint("tcp://localhost:abc")

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="Unknown policy endpoint"):
            parse_endpoint("http://localhost:9000")


class TestExternalPolicyClient:
    def test_zero_reply(self, policy_server):
        with ExternalPolicyClient(policy_server.endpoint, deadline=2.0) as client:
            act = external_policy_query(client, np.array([0.1, 0.2]), 1)
        assert act.tolist() == [0.0]

    def test_observation_clipped(self, policy_server):
        with ExternalPolicyClient(policy_server.endpoint, deadline=2.0) as client:
            client.query(np.array([12.7, -11.0, 3.0]), 1)
        assert policy_server.requests[0]["obs"] == [10.0, -10.0, 3.0]

    def test_action_saturated(self, policy_server):
        policy_server.reply = lambda req: {"act": [250.0, -400.0]}
        with ExternalPolicyClient(policy_server.endpoint, deadline=2.0, torque_limit=100.0) as client:
            act = client.query(np.zeros(2), 2)
        assert act.tolist() == [100.0, -100.0]

    def test_deadline_exceeded(self, policy_server):
        policy_server.reply = lambda req: 0.5
        with ExternalPolicyClient(policy_server.endpoint, deadline=0.05) as client:
            with pytest.raises(PolicyProtocolError, match="deadline"):
                client.query(np.zeros(2), 1)

    def test_malformed_reply(self, policy_server):
        policy_server.reply = lambda req: b"not json\n"
        with ExternalPolicyClient(policy_server.endpoint, deadline=2.0) as client:
            with pytest.raises(PolicyProtocolError, match="Malformed"):
                client.query(np.zeros(2), 1)

    def test_missing_act(self, policy_server):
        policy_server.reply = lambda req: {"action": [0.0]}
        with ExternalPolicyClient(policy_server.endpoint, deadline=2.0) as client:
            with pytest.raises(PolicyProtocolError, match="'act'"):
                client.query(np.zeros(2), 1)

    def test_wrong_action_count(self, policy_server):
        policy_server.reply = lambda req: {"act": [0.0, 0.0]}
        with ExternalPolicyClient(policy_server.endpoint, deadline=2.0) as client:
            with pytest.raises(PolicyProtocolError, match="2 actions"):
                client.query(np.zeros(2), 1)

    def test_non_finite_action(self, policy_server):
        policy_server.reply = lambda req: b'{"act": [NaN]}\n'
        with ExternalPolicyClient(policy_server.endpoint, deadline=2.0) as client:
            with pytest.raises(PolicyProtocolError, match="non-finite"):
                client.query(np.zeros(2), 1)

    def test_connection_refused(self):
        with socketserver.TCPServer(("127.0.0.1", 0), socketserver.BaseRequestHandler) as reserved:
            port = reserved.server_address[1]
        client = ExternalPolicyClient(f"tcp://127.0.0.1:{port}", deadline=0.5)
        with pytest.raises(PolicyProtocolError, match="Cannot connect"):
            client.connect()


class TestPolicyPool:
    def test_lease_reuses_connection(self, policy_server):
        with PolicyPool(policy_server.endpoint, size=1, deadline=2.0) as pool:
            with pool.lease() as first:
                first.query(np.zeros(2), 1)
            with pool.lease() as second:
                second.query(np.zeros(2), 1)
        assert first is second
        assert len(policy_server.requests) == 2

    def test_protocol_error_closes_client(self, policy_server):
        policy_server.reply = lambda req: b"garbage\n"
        with PolicyPool(policy_server.endpoint, size=1, deadline=2.0) as pool:
            with pytest.raises(PolicyProtocolError):
                with pool.lease() as client:
                    client.query(np.zeros(2), 1)
            assert client._sock is None

    def test_size_must_be_positive(self):
        with pytest.raises(ValueError, match="Pool size"):
            PolicyPool("tcp://127.0.0.1:1", size=0)


class TestExternalPolicyInSimulation:
    def test_zero_torque_server_matches_passive(self, policy_server):
        model = CompassGait()
        config = SimulationConfig(dt=0.002, timeout=3.0)
        spec = PolicySpec("external", {"endpoint": policy_server.endpoint}, id="remote")
        with PolicyPool(policy_server.endpoint, deadline=2.0) as pool:
            remote = simulate_gait_cycle(model.default_section_state(), spec, NULL_PUSH, model, config,
                                         pools={"remote": pool})
        passive = simulate_gait_cycle(model.default_section_state(), PASSIVE, NULL_PUSH, model, config)
        assert remote.same_result(passive)
        assert len(policy_server.requests) > 0
        assert all(len(r["obs"]) == 4 for r in policy_server.requests)

    def test_missing_pool(self):
        spec = PolicySpec("external", {"endpoint": "tcp://127.0.0.1:1"}, id="remote")
        model = CompassGait()
        with pytest.raises(ValueError, match="No connection pool"):
            simulate_gait_cycle(model.default_section_state(), spec, NULL_PUSH, model)

    def test_protocol_error_aborts_cycle(self, policy_server):
        policy_server.reply = lambda req: {"act": "zero"}
        model = CompassGait()
        spec = PolicySpec("external", {"endpoint": policy_server.endpoint}, id="remote")
        with PolicyPool(policy_server.endpoint, deadline=2.0) as pool:
            with pytest.raises(PolicyProtocolError):
                simulate_gait_cycle(model.default_section_state(), spec, NULL_PUSH, model, pools={"remote": pool})
