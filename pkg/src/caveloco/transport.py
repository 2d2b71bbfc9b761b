"""Locomotion commands, their 24-byte UDP wire format, a receiver stub and rate control.

Packet layout (big-endian)::

    0-3   magic "CAVL"
    4     version (1)
    5     message type: 1 command, 2 heartbeat
    6-7   reserved, zero
    8-15  timestamp, microseconds (u64)
    16-19 person id (u32)
    20    action code (ActionLabel value)
    21    confidence, round(p * 255)
    22-23 yaw, centidegrees (i16, -18000..18000)

Heartbeats carry a timestamp and zeros in every command field.
"""
from __future__ import annotations

import math
import os
import socket
import struct
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    BadActionCode,
    BadLength,
    BadMagic,
    BadMessageType,
    BadParams,
    BadVersion,
    DecodeError,
    ReceiveTimeout,
    YawOutOfRange,
)
from .skeleton import ActionLabel

MAGIC = b"CAVL"
VERSION = 1
MSG_COMMAND = 1
MSG_HEARTBEAT = 2
PACKET_SIZE = 24
DEFAULT_PORT = 47474
PORT_ENV = "CAVELOCO_PORT"
STALENESS_S = 0.2
HEARTBEAT_S = 1.0
FPS_LADDER = (15, 20, 25, 30)

_FMT = struct.Struct(">4sBBHQIBBh")
assert _FMT.size == PACKET_SIZE


def default_port() -> int:
    """Port from ``CAVELOCO_PORT`` if set, else 47474."""
    v = os.environ.get(PORT_ENV)
    return int(v) if v else DEFAULT_PORT


# ---------------------------------------------------------------------------
# commands


@dataclass(frozen=True)
class LocomotionCommand:
    person_id: int
    label: ActionLabel
    confidence: float
    yaw: float  # radians, body facing
    timestamp_us: int
    speed: float = 1.0  # m/s for moving labels; not on the wire

    @property
    def velocity(self) -> tuple[float, float]:
        if self.label == ActionLabel.StandStill:
            return (0.0, 0.0)
        heading = self.yaw + {ActionLabel.StepForward: 0.0, ActionLabel.StepLeft: math.pi / 2,
                              ActionLabel.StepRight: -math.pi / 2}[self.label]
        return (self.speed * math.cos(heading), self.speed * math.sin(heading))


@dataclass(frozen=True)
class Heartbeat:
    timestamp_us: int


def map_action(decision, speed_mps: float = 1.0) -> LocomotionCommand:
    """Command for an ``ActionDecision``: forward along the body yaw, left/right at +-90 degrees."""
    label = ActionLabel(decision.label)
    return LocomotionCommand(
        int(decision.person_id),
        label,
        float(decision.probabilities[int(label)]),
        float(decision.yaw),
        int(round(decision.timestamp * 1e6)),
        speed_mps,
    )


# ---------------------------------------------------------------------------
# wire format


def _centidegrees(yaw: float) -> int:
    cd = int(round(math.degrees(yaw) * 100.0))
    if not -18000 <= cd <= 18000:
        raise YawOutOfRange(f"yaw {yaw} rad outside [-180, 180] degrees")
    return cd


def encode(cmd: LocomotionCommand) -> bytes:
    if not 0.0 <= cmd.confidence <= 1.0:
        raise BadParams(f"confidence {cmd.confidence} outside [0, 1]")
    return _FMT.pack(MAGIC, VERSION, MSG_COMMAND, 0, int(cmd.timestamp_us), int(cmd.person_id),
                     int(cmd.label), int(round(cmd.confidence * 255)), _centidegrees(cmd.yaw))


def encode_heartbeat(timestamp_us: int) -> bytes:
    return _FMT.pack(MAGIC, VERSION, MSG_HEARTBEAT, 0, int(timestamp_us), 0, 0, 0, 0)


def decode(data: bytes, speed: float = 1.0) -> LocomotionCommand | Heartbeat:
    if len(data) != PACKET_SIZE:
        raise BadLength(f"expected {PACKET_SIZE} bytes, got {len(data)}")
    magic, version, mtype, _reserved, ts, pid, action, conf, cd = _FMT.unpack(data)
    if magic != MAGIC:
        raise BadMagic(magic.hex())
    if version != VERSION:
        raise BadVersion(version)
    if mtype == MSG_HEARTBEAT:
        return Heartbeat(ts)
    if mtype != MSG_COMMAND:
        raise BadMessageType(mtype)
    if action >= len(ActionLabel):
        raise BadActionCode(action)
    if not -18000 <= cd <= 18000:
        raise YawOutOfRange(cd)
    return LocomotionCommand(pid, ActionLabel(action), conf / 255.0, math.radians(cd / 100.0), ts, speed)


# ---------------------------------------------------------------------------
# UDP endpoints


class UdpSender:
    """Fire-and-forget datagrams; sends a heartbeat when nothing went out for a second."""

    def __init__(self, host: str = "127.0.0.1", port: int | None = None, heartbeat_s: float = HEARTBEAT_S):
        self.addr = (host, default_port() if port is None else port)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.heartbeat_s = heartbeat_s
        self.last_sent: float | None = None
        self.sent = 0

    def send_bytes(self, data: bytes, now: float | None = None) -> None:
        self.sock.sendto(data, self.addr)
        self.last_sent = time.monotonic() if now is None else now
        self.sent += 1

    def send(self, cmd: LocomotionCommand, now: float | None = None) -> None:
        self.send_bytes(encode(cmd), now)

    def maybe_heartbeat(self, timestamp_us: int, now: float | None = None) -> bool:
        now = time.monotonic() if now is None else now
        if self.last_sent is not None and now - self.last_sent < self.heartbeat_s:
            return False
        self.send_bytes(encode_heartbeat(timestamp_us), now)
        return True

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class UdpReceiver:
    """Validating receive loop.

    Malformed datagrams bump ``decode_errors`` and are skipped. With a
    ``clock`` (returning microseconds on the sender's time base), commands
    older than ``staleness_s`` are dropped and counted in ``stale``.
    """

    def __init__(self, host: str = "127.0.0.1", port: int | None = None, staleness_s: float = STALENESS_S,
                 clock=None, speed: float = 1.0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, default_port() if port is None else port))
        self.port = self.sock.getsockname()[1]
        self.staleness_us = staleness_s * 1e6
        self.clock = clock
        self.speed = speed
        self.decode_errors = 0
        self.stale = 0
        self.heartbeats = 0

    def receive(self, timeout: float = 1.0) -> LocomotionCommand:
        """Next valid, fresh command; heartbeats are consumed silently."""
        deadline = time.monotonic() + timeout
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                raise ReceiveTimeout(f"no command within {timeout} s")
            self.sock.settimeout(left)
            try:
                data, _ = self.sock.recvfrom(64)
            except socket.timeout:
                raise ReceiveTimeout(f"no command within {timeout} s") from None
            try:
                msg = decode(data, self.speed)
            except DecodeError:
                self.decode_errors += 1
                continue
            if isinstance(msg, Heartbeat):
                self.heartbeats += 1
                continue
            if self.clock is not None and self.clock() - msg.timestamp_us > self.staleness_us:
                self.stale += 1
                continue
            return msg

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# render-side stand-in


class ReceiverStub:
    """Integrates command velocities into a virtual position.

    Each command's velocity holds until the next one (zero-order hold); a
    command not newer than the last applied one is ignored.
    """

    def __init__(self, origin=(0.0, 0.0)):
        self.position = [float(origin[0]), float(origin[1])]
        self.last: LocomotionCommand | None = None
        self.trajectory: list[tuple[int, float, float, int]] = []
        self.ignored = 0

    def apply(self, cmd: LocomotionCommand) -> bool:
        if self.last is not None:
            if cmd.timestamp_us <= self.last.timestamp_us:
                self.ignored += 1
                return False
            dt = (cmd.timestamp_us - self.last.timestamp_us) * 1e-6
            vx, vy = self.last.velocity
            self.position[0] += vx * dt
            self.position[1] += vy * dt
        self.last = cmd
        self.trajectory.append((cmd.timestamp_us, self.position[0], self.position[1], int(cmd.label)))
        return True

    def position_at(self, timestamp_us: int) -> tuple[float, float]:
        """Trajectory position at a time, extrapolating the held velocity past the last command."""
        if self.last is None:
            return tuple(self.position)
        dt = max(0, timestamp_us - self.last.timestamp_us) * 1e-6
        vx, vy = self.last.velocity
        return (self.position[0] + vx * dt, self.position[1] + vy * dt)

    def write_trajectory(self, path) -> None:
        lines = ["# timestamp_us x_m y_m action"]
        lines += [f"{t} {x:.6f} {y:.6f} {ActionLabel(a).name}" for t, x, y, a in self.trajectory]
        Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[tuple[int, float, float, ActionLabel]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        t, x, y, a = line.split()
        out.append((int(t), float(x), float(y), ActionLabel[a]))
    return out


# ---------------------------------------------------------------------------
# rate control


class RateController:
    """Picks the processing rate from a fixed ladder.

    Over budget: one step down at once. Under 70% of budget for ``patience``
    consecutive frames: one step up. Per-stage exponential averages are kept
    for reporting.
    """

    def __init__(self, ladder=FPS_LADDER, min_fps: int | None = None, max_fps: int | None = None,
                 target: int | None = None, patience: int = 30, headroom: float = 0.7, ema_alpha: float = 0.1):
        ladder = sorted(set(int(v) for v in ladder))
        lo = ladder[0] if min_fps is None else min_fps
        hi = ladder[-1] if max_fps is None else max_fps
        self.ladder = [v for v in ladder if lo <= v <= hi]
        if not self.ladder:
            raise BadParams("no ladder rung inside [min_fps, max_fps]")
        self.min_fps, self.max_fps = self.ladder[0], self.ladder[-1]
        self.target = self.max_fps if target is None else min(max(target, self.min_fps), self.max_fps)
        if self.target not in self.ladder:
            self.target = max(v for v in self.ladder if v <= self.target)
        self.patience = patience
        self.headroom = headroom
        self.ema_alpha = ema_alpha
        self.under = 0
        self.stage_ms: dict[str, float] = {}
        self.log: list[tuple[float, int]] = []

    @property
    def budget_ms(self) -> float:
        return 1000.0 / self.target

    def update(self, latencies_ms) -> int:
        """Feed one frame's stage latencies (mapping or sequence of ms); returns the new target."""
        items = latencies_ms.items() if hasattr(latencies_ms, "items") else enumerate(latencies_ms)
        total = 0.0
        for name, ms in items:
            ms = float(ms)
            if ms < 0 or not math.isfinite(ms):
                raise BadParams(f"latency must be finite and >= 0, got {ms}")
            total += ms
            prev = self.stage_ms.get(str(name))
            self.stage_ms[str(name)] = ms if prev is None else prev + self.ema_alpha * (ms - prev)
        i = self.ladder.index(self.target)
        if total > self.budget_ms:
            self.under = 0
            self.target = self.ladder[max(0, i - 1)]
        elif total < self.headroom * self.budget_ms:
            self.under += 1
            if self.under >= self.patience:
                self.under = 0
                self.target = self.ladder[min(len(self.ladder) - 1, i + 1)]
        else:
            self.under = 0
        self.log.append((total, self.target))
        return self.target
