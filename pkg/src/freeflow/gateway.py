"""Socket gateway streaming bus events to dashboard clients.

Protocol: newline-delimited JSON both ways.  On connect a client receives
one snapshot frame (``{"kind": "Snapshot", ...}``) describing current
per-cell densities and per-ramp queues, then every derived- and
commands-topic event from that moment on.  Clients send OperatorAction
event lines; each valid one is acknowledged with an Ack frame and queued
for the next tick boundary, malformed frames get an Error frame and the
connection stays open.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
from dataclasses import asdict
from typing import Optional

from .bus import Topic
from .events import Event, EventKind, deserialize_event, serialize_event


class DashboardGateway:
    def __init__(self, runtime, host: str = "127.0.0.1", port: int = 0):
        self.runtime = runtime
        self.host = host
        self._requested_port = port
        self._server: Optional[socket.socket] = None
        self._clients: list["_Client"] = []
        self._lock = threading.Lock()
        self._running = False

    @property
    def port(self) -> int:
        if self._server is None:
            raise RuntimeError("gateway not started")
        return self._server.getsockname()[1]

    def start(self) -> None:
        self._server = socket.create_server((self.host, self._requested_port))
        self._server.settimeout(0.2)
        self._running = True
        self.runtime.bus.subscribe(Topic.DERIVED, self._fan_out)
        self.runtime.bus.subscribe(Topic.COMMANDS, self._fan_out)
        threading.Thread(target=self._accept_loop, name="gateway-accept", daemon=True).start()

    def stop(self) -> None:
        self._running = False
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            client.close()
        if self._server is not None:
            self._server.close()

    def _fan_out(self, event: Event) -> None:
        frame = serialize_event(event)
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            client.send(frame)

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            client = _Client(conn, self)
            with self._lock:
                self._clients.append(client)
            client.start()

    def _drop(self, client: "_Client") -> None:
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)

    def snapshot_frame(self) -> bytes:
        snap = self.runtime.snapshot
        payload = {"kind": "Snapshot"}
        if snap is None:
            payload.update({"time": 0, "cells": [], "ramps": []})
        else:
            payload.update({"time": snap.time_s, "cells": snap.cells, "ramps": snap.ramps})
        return (json.dumps(payload, separators=(",", ":")) + "\n").encode("utf-8")


class _Client:
    def __init__(self, conn: socket.socket, gateway: DashboardGateway):
        self.conn = conn
        self.gateway = gateway
        self.outbound: "queue.Queue[Optional[bytes]]" = queue.Queue()
        self._closed = False

    def start(self) -> None:
        self.send(self.gateway.snapshot_frame())
        threading.Thread(target=self._writer, daemon=True).start()
        threading.Thread(target=self._reader, daemon=True).start()

    def send(self, frame: bytes) -> None:
        if not self._closed:
            self.outbound.put(frame)

    def close(self) -> None:
        self._closed = True
        self.outbound.put(None)
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.conn.close()
        self.gateway._drop(self)

    def _writer(self) -> None:
        while True:
            frame = self.outbound.get()
            if frame is None:
                return
            try:
                self.conn.sendall(frame)
            except OSError:
                self.close()
                return

    def _reader(self) -> None:
        buffer = b""
        while not self._closed:
            try:
                chunk = self.conn.recv(4096)
            except OSError:
                break
            if not chunk:
                break
            buffer += chunk
            while b"\n" in buffer:
                line, buffer = buffer.split(b"\n", 1)
                if line.strip():
                    self._handle_line(line)
        self.close()

    def _handle_line(self, line: bytes) -> None:
        try:
            event = deserialize_event(line)
            if event.kind is not EventKind.OPERATOR_ACTION:
                raise ValueError("clients may only send OperatorAction events")
            self.gateway.runtime.submit_operator_action(event)
        except Exception as exc:
            error = json.dumps({"kind": "Error", "message": str(exc)}, separators=(",", ":"))
            self.send((error + "\n").encode("utf-8"))
            return
        ack = json.dumps(
            {"kind": "Ack", "action_id": event.attributes.get("action_id"), "id": event.id},
            separators=(",", ":"),
        )
        self.send((ack + "\n").encode("utf-8"))
