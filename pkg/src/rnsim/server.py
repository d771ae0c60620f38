"""TCP environment service: length-prefixed JSON messages, one environment
instance per connection, scene and occlusion field shared read-only.

Framing: 4-byte big-endian payload length, then UTF-8 JSON. Requests:
  {"cmd": "reset", "seed": int, "stage": 1|2}  -> {"obs": {...}}
  {"cmd": "step", "action": float}             -> {"obs", "reward", "done", "reason", "info"}
  {"cmd": "close"}                             -> {"ok": true}
Unknown commands get {"error": ...} without closing; malformed frames get an
error reply and then the connection closes.
"""

from __future__ import annotations

import base64
import json
import socket
import socketserver
import struct
import threading

import numpy as np

from .env import EnvConfig, EpisodeTerminated, NavEnv, Observation

MAX_FRAME = 16 * 1024 * 1024


class ProtocolError(Exception):
    """Framing violation; the connection is not recoverable."""


def send_frame(sock: socket.socket, obj: dict) -> None:
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> dict | None:
    """One request, None on clean EOF; ProtocolError on framing violations."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length == 0 or length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} outside (0, {MAX_FRAME}]")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ProtocolError(f"invalid JSON payload: {e}") from e
    if not isinstance(obj, dict):
        raise ProtocolError("request must be a JSON object")
    return obj


def _json_safe(value):
    """Recursively convert numpy scalars and non-finite floats for JSON."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return f if np.isfinite(f) else None
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value


def encode_observation(obs: Observation) -> dict:
    h, w = obs.image.shape[:2]
    return {
        "image": base64.b64encode(obs.image.tobytes()).decode("ascii"),
        "h": h,
        "w": w,
        "state": [float(x) for x in obs.state],
    }


class _SessionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: EnvServer = self.server
        env = server.make_env()
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                request = read_frame(sock)
            except ProtocolError as e:
                try:
                    send_frame(sock, {"error": str(e)})
                except OSError:
                    pass
                return
            except OSError:
                return
            if request is None:
                return
            reply, keep_open = self._dispatch(env, request)
            try:
                send_frame(sock, reply)
            except OSError:
                return
            if not keep_open:
                return

    def _dispatch(self, env: NavEnv, request: dict):
        cmd = request.get("cmd")
        if cmd == "reset":
            seed = request.get("seed")
            if not isinstance(seed, int):
                return {"error": "reset needs an integer 'seed'"}, True
            stage = request.get("stage")
            if stage is not None and stage not in (1, 2):
                return {"error": "stage must be 1 or 2"}, True
            obs = env.reset(seed=seed, stage=stage)
            return {"obs": encode_observation(obs)}, True
        if cmd == "step":
            action = request.get("action")
            if not isinstance(action, (int, float)) or isinstance(action, bool):
                return {"error": "step needs a numeric 'action'"}, True
            try:
                result = env.step(float(action))
            except EpisodeTerminated as e:
                return {"error": str(e)}, True
            return {
                "obs": encode_observation(result.observation),
                "reward": result.reward,
                "done": result.terminated,
                "reason": result.reason,
                "info": _json_safe(result.info),
            }, True
        if cmd == "close":
            return {"ok": True}, False
        return {"error": f"unknown command {cmd!r}"}, True


class EnvServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, scene, field, config: EnvConfig | None = None,
                 base_light=None, light_override: dict | None = None):
        self.scene = scene
        self.field = field
        self.config = config or EnvConfig()
        self.base_light = base_light
        self.light_override = light_override
        super().__init__(address, _SessionHandler)

    def make_env(self) -> NavEnv:
        return NavEnv(self.scene, self.field, self.config,
                      base_light=self.base_light,
                      light_override=self.light_override)


def serve_forever(scene, field, port: int, config=None, base_light=None,
                  light_override=None, host: str = "0.0.0.0",
                  ready_event: threading.Event | None = None):
    with EnvServer((host, port), scene, field, config, base_light,
                   light_override) as server:
        if ready_event is not None:
            server._bound_port = server.server_address[1]
            ready_event.set()
        server.serve_forever()


class EnvClient:
    """Minimal blocking client for tests and the rollout tool."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def call(self, request: dict) -> dict:
        send_frame(self.sock, request)
        reply = read_frame(self.sock)
        if reply is None:
            raise ConnectionError("server closed the connection")
        return reply

    def reset(self, seed: int, stage: int | None = None) -> dict:
        req = {"cmd": "reset", "seed": seed}
        if stage is not None:
            req["stage"] = stage
        return self.call(req)

    def step(self, action: float) -> dict:
        return self.call({"cmd": "step", "action": action})

    def close(self):
        try:
            self.call({"cmd": "close"})
        except (ConnectionError, OSError):
            pass
        self.sock.close()


def decode_image(obs: dict) -> np.ndarray:
    raw = base64.b64decode(obs["image"])
    return np.frombuffer(raw, dtype=np.uint8).reshape(obs["h"], obs["w"], 3)
