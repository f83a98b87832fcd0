"""JSON-lines request/response façades over a loopback TCP socket.

Each request is one JSON object per line with an ``op`` field; each reply is
one JSON object per line, ``{"ok": true, ...}`` or ``{"ok": false,
"error": <ExceptionName>, "detail": <text>}``.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from typing import Any, Callable

from ctlab.protocol import EncounterCode, TemporaryKey


def code_to_json(code: EncounterCode) -> dict:
    return {"id": code.hex(), "epoch": code.epoch_index}


def code_from_json(obj: dict) -> EncounterCode:
    return EncounterCode(bytes.fromhex(obj["id"]), int(obj["epoch"]))


def key_to_json(key: TemporaryKey) -> dict:
    return {"key": key.hex(), "day": key.day_index}


def key_from_json(obj: dict) -> TemporaryKey:
    return TemporaryKey(bytes.fromhex(obj["key"]), int(obj["day"]))


class JsonLineService:
    """Dispatches decoded requests to ``op_<name>`` methods."""

    def handle(self, request: dict) -> dict:
        op = request.get("op")
        fn: Callable[[dict], dict] | None = getattr(self, f"op_{op}", None)
        if fn is None:
            return {"ok": False, "error": "UnknownOp", "detail": str(op)}
        try:
            reply = fn(request)
        except (KeyError, TypeError, ValueError) as exc:
            if type(exc).__module__.startswith("ctlab"):
                return {"ok": False, "error": type(exc).__name__, "detail": str(exc)}
            return {"ok": False, "error": "BadRequest", "detail": f"{type(exc).__name__}: {exc}"}
        except Exception as exc:
            return {"ok": False, "error": type(exc).__name__, "detail": str(exc)}
        return {"ok": True, **reply}

    def handle_line(self, line: str | bytes) -> str:
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
        except ValueError as exc:
            return json.dumps({"ok": False, "error": "BadRequest", "detail": str(exc)})
        return json.dumps(self.handle(request), sort_keys=True)


class ServerFacade(JsonLineService):
    """Wire endpoints for the four client capabilities of the exposure server."""

    def __init__(self, server):
        self.server = server

    def op_create_account(self, req):
        return {"account_id": self.server.create_account(req["source_addr"], req.get("phone"))}

    def op_upload(self, req):
        codes = [code_from_json(c) for c in req["codes"]]
        return {"added": self.server.upload_encounters(int(req["account_id"]), codes)}

    def op_report_positive(self, req):
        keys = [key_from_json(k) for k in req["keys"]]
        return {"added": self.server.report_positive(keys, req["covidcode"])}

    def op_poll(self, req):
        return {"notified": self.server.poll_notifications(int(req["account_id"]))}

    def op_download_keys(self, req):
        return {"keys": [key_to_json(k) for k in self.server.download_keys()]}


class ConcentratorFacade(JsonLineService):
    """The two concentrator calls: collectors upload, polluters download."""

    def __init__(self, store):
        self.store = store

    def op_upload(self, req):
        codes = [code_from_json(c) for c in req["codes"]]
        return {"added": self.store.upload(str(req["collector"]), codes, float(req["time"]))}

    def op_download(self, req):
        return {"codes": [code_to_json(c) for c in self.store.download(float(req["time"]))]}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            if not raw.strip():
                continue
            self.wfile.write(self.server.service.handle_line(raw).encode() + b"\n")
            self.wfile.flush()


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def serve(service: JsonLineService, host: str = "127.0.0.1", port: int = 0):
    """Start a background loopback server; returns the socketserver (call
    ``shutdown()`` then ``server_close()`` when done)."""
    srv = _TCPServer((host, port), _Handler)
    srv.service = service
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv


class JsonLineClient:
    def __init__(self, address, timeout: float = 5.0):
        self._sock = socket.create_connection(address, timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    def call(self, op: str, **fields: Any) -> dict:
        self._sock.sendall(json.dumps({"op": op, **fields}).encode() + b"\n")
        line = self._rfile.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def close(self):
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
