"""External policy client: line-delimited JSON over a stream socket or a child's stdio."""

from __future__ import annotations

import json
import logging
import math
import os
import queue
import selectors
import shlex
import socket
import subprocess
import time
from collections.abc import Iterator
from contextlib import contextmanager
from typing import Any, NoReturn

import numpy as np

from .errors import PolicyProtocolError

logger = logging.getLogger(__name__)

OBS_CLIP = 10.0
DEFAULT_DEADLINE = 0.1  # seconds per request
DEFAULT_TORQUE_LIMIT = 100.0


def parse_endpoint(endpoint: str) -> tuple[str, str]:
    """Split an endpoint into (transport, address).

    Accepted forms: ``tcp://host:port``, ``unix:/path/to/socket`` and
    ``stdio:command arg ...``.
    """
    if endpoint.startswith("tcp://"):
        address = endpoint[len("tcp://") :]
        host, sep, port = address.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"Invalid tcp endpoint: {endpoint!r}. Use tcp://host:port.")
        return "tcp", address
    if endpoint.startswith("unix:"):
        path = endpoint[len("unix:") :]
        if not path:
            raise ValueError(f"Invalid unix endpoint: {endpoint!r}. Use unix:/path/to/socket.")
        return "unix", path
    if endpoint.startswith("stdio:"):
        command = endpoint[len("stdio:") :].strip()
        if not command:
            raise ValueError(f"Invalid stdio endpoint: {endpoint!r}. Use stdio:command args.")
        return "stdio", command
    raise ValueError(f"Unknown policy endpoint {endpoint!r}. Use tcp://, unix: or stdio:.")


class ExternalPolicyClient:
    """One connection to a policy server; one request in flight at a time."""

    def __init__(
        self,
        endpoint: str,
        deadline: float = DEFAULT_DEADLINE,
        torque_limit: float = DEFAULT_TORQUE_LIMIT,
    ) -> None:
        self.transport, self.address = parse_endpoint(endpoint)
        self.endpoint = endpoint
        self.deadline = deadline
        self.torque_limit = torque_limit
        self._sock: socket.socket | None = None
        self._proc: subprocess.Popen | None = None
        self._buffer = b""

    def __enter__(self) -> "ExternalPolicyClient":
        self.connect()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()

    def connect(self) -> None:
        if self._sock is not None or self._proc is not None:
            return
        try:
            if self.transport == "tcp":
                host, _, port = self.address.rpartition(":")
                self._sock = socket.create_connection((host, int(port)), timeout=max(self.deadline, 1.0))
            elif self.transport == "unix":
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.settimeout(max(self.deadline, 1.0))
                sock.connect(self.address)
                self._sock = sock
            else:
                self._proc = subprocess.Popen(
                    shlex.split(self.address), stdin=subprocess.PIPE, stdout=subprocess.PIPE
                )
        except OSError as e:
            raise PolicyProtocolError(f"Cannot connect to policy at {self.endpoint}: {e}")
        logger.debug("connected to policy %s", self.endpoint)

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
        if self._proc is not None:
            try:
                if self._proc.stdin:
                    self._proc.stdin.close()
                self._proc.wait(timeout=1.0)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
            self._proc = None
        self._buffer = b""

    # ---- internal ----

    def _send(self, payload: bytes) -> None:
        try:
            if self._sock is not None:
                self._sock.sendall(payload)
            elif self._proc is not None and self._proc.stdin is not None:
                self._proc.stdin.write(payload)
                self._proc.stdin.flush()
            else:
                raise PolicyProtocolError(f"Policy connection {self.endpoint} is not open")
        except OSError as e:
            raise PolicyProtocolError(f"Policy connection {self.endpoint} failed on send: {e}")

    def _recv_chunk(self, timeout: float) -> bytes:
        if self._sock is not None:
            self._sock.settimeout(timeout)
            try:
                return self._sock.recv(4096)
            except socket.timeout:
                self._deadline_exceeded()
        assert self._proc is not None and self._proc.stdout is not None
        fd = self._proc.stdout.fileno()
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_READ)
            if not sel.select(timeout):
                self._deadline_exceeded()
        return os.read(fd, 4096)

    def _deadline_exceeded(self) -> NoReturn:
        raise PolicyProtocolError(f"Policy at {self.endpoint} missed the {self.deadline * 1000:.0f} ms deadline")

    def _readline(self) -> bytes:
        deadline_at = time.monotonic() + self.deadline
        while b"\n" not in self._buffer:
            remaining = deadline_at - time.monotonic()
            if remaining <= 0:
                self._deadline_exceeded()
            try:
                chunk = self._recv_chunk(remaining)
            except OSError as e:
                raise PolicyProtocolError(f"Policy connection {self.endpoint} failed on receive: {e}")
            if not chunk:
                raise PolicyProtocolError(f"Policy at {self.endpoint} closed the connection")
            self._buffer += chunk
        line, _, self._buffer = self._buffer.partition(b"\n")
        return line

    def _handle(self, raw: bytes, n_actions: int) -> np.ndarray:
        try:
            data: Any = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise PolicyProtocolError(f"Malformed policy reply: {_sanitize(raw)}")
        if not isinstance(data, dict) or not isinstance(data.get("act"), list):
            raise PolicyProtocolError(f"Policy reply has no 'act' list: {_sanitize(raw)}")
        act = data["act"]
        if len(act) != n_actions:
            raise PolicyProtocolError(f"Policy returned {len(act)} actions, model expects {n_actions}")
        try:
            values = [float(a) for a in act]
        except (TypeError, ValueError):
            raise PolicyProtocolError(f"Policy actions must be numbers: {_sanitize(raw)}")
        if not all(math.isfinite(v) for v in values):
            raise PolicyProtocolError(f"Policy returned non-finite actions: {values}")
        return np.clip(np.array(values, dtype=np.float64), -self.torque_limit, self.torque_limit)

    # ---- protocol ----

    def query(self, observation: np.ndarray, n_actions: int) -> np.ndarray:
        """Send one clipped observation and return the saturated action."""
        self.connect()
        obs = np.clip(np.asarray(observation, dtype=np.float64), -OBS_CLIP, OBS_CLIP)
        self._send((json.dumps({"obs": obs.tolist()}) + "\n").encode("utf-8"))
        return self._handle(self._readline(), n_actions)


def _sanitize(raw: bytes) -> str:
    """Keep error messages short."""
    return raw.decode("utf-8", errors="replace")[:200]


def external_policy_query(client: ExternalPolicyClient, observation: np.ndarray, n_actions: int) -> np.ndarray:
    return client.query(observation, n_actions)


class PolicyPool:
    """Connections to one policy endpoint handed out as exclusive leases."""

    def __init__(
        self,
        endpoint: str,
        size: int = 1,
        deadline: float = DEFAULT_DEADLINE,
        torque_limit: float = DEFAULT_TORQUE_LIMIT,
    ) -> None:
        if size < 1:
            raise ValueError(f"Pool size must be >= 1, got {size}")
        parse_endpoint(endpoint)
        self.endpoint = endpoint
        self.deadline = deadline
        self.torque_limit = torque_limit
        self._idle: queue.Queue[ExternalPolicyClient | None] = queue.Queue()
        self._all: list[ExternalPolicyClient] = []
        for _ in range(size):
            self._idle.put(None)  # connect lazily

    def __enter__(self) -> "PolicyPool":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()

    @contextmanager
    def lease(self) -> Iterator[ExternalPolicyClient]:
        client = self._idle.get()
        if client is None:
            client = ExternalPolicyClient(self.endpoint, self.deadline, self.torque_limit)
            self._all.append(client)
        try:
            yield client
        except PolicyProtocolError:
            # a late reply would desynchronise the stream
            client.close()
            raise
        finally:
            self._idle.put(client)

    def close(self) -> None:
        for client in self._all:
            client.close()
