"""Orchestrator <-> station message contract and its in-process transport.

Frame: ``u32 BE header length | UTF-8 JSON header | binary payload``. The
header always carries ``type``, ``run_id`` and ``seq``; the payload is a
serialized TrainBundle or ModelParameters blob (or empty).
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field

from .errors import DataError

PULL_TRAIN = "PullTrain"
EXECUTE_TRAIN = "ExecuteTrain"
TRAIN_RESULT = "TrainResult"
BROADCAST = "Broadcast"
REPLICA_RESULT = "ReplicaResult"
MESSAGE_TYPES = (PULL_TRAIN, EXECUTE_TRAIN, TRAIN_RESULT, BROADCAST, REPLICA_RESULT)


@dataclass(frozen=True)
class Message:
    type: str
    run_id: str
    seq: int
    fields: dict = field(default_factory=dict)
    payload: bytes = b""

    def __post_init__(self):
        if self.type not in MESSAGE_TYPES:
            raise DataError(f"unknown message type {self.type!r}")

    def encode(self) -> bytes:
        header = {"type": self.type, "run_id": self.run_id, "seq": self.seq, **self.fields}
        raw = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
        return struct.pack(">I", len(raw)) + raw + self.payload

    @classmethod
    def decode(cls, frame: bytes) -> "Message":
        if len(frame) < 4:
            raise DataError("truncated frame")
        (n,) = struct.unpack_from(">I", frame)
        if 4 + n > len(frame):
            raise DataError("truncated frame header")
        header = json.loads(frame[4 : 4 + n])
        kind, run_id, seq = header.pop("type"), header.pop("run_id"), header.pop("seq")
        return cls(kind, run_id, seq, header, bytes(frame[4 + n :]))


class WireLog:
    """Append-only record of every frame that crossed a transport."""

    def __init__(self):
        self.frames: list[tuple[str, str, bytes]] = []
        self._lock = threading.Lock()

    def record(self, direction: str, peer: str, frame: bytes) -> None:
        with self._lock:
            self.frames.append((direction, peer, bytes(frame)))

    def __iter__(self):
        return iter(self.frames)

    def __len__(self):
        return len(self.frames)

    def contains(self, needle: bytes) -> bool:
        return any(needle in frame for _, _, frame in self.frames)

    def headers(self) -> list[dict]:
        out = []
        for direction, peer, frame in self.frames:
            msg = Message.decode(frame)
            out.append({"direction": direction, "peer": peer, "type": msg.type, "seq": msg.seq, "payload_bytes": len(msg.payload)})
        return out


class Channel:
    """Sequenced, logged request/response link from the orchestrator to one station."""

    def __init__(self, run_id: str, peer: str, handler, log: WireLog | None = None, counter=None):
        self.run_id = run_id
        self.peer = peer
        self.handler = handler
        self.log = log if log is not None else WireLog()
        self._counter = counter if counter is not None else SequenceCounter()

    def next_seq(self) -> int:
        return self._counter.next()

    def send(self, kind: str, fields: dict | None = None, payload: bytes = b"") -> bytes:
        frame = Message(kind, self.run_id, self.next_seq(), fields or {}, payload).encode()
        self.log.record("out", self.peer, frame)
        return frame

    def receive(self, frame: bytes) -> Message:
        self.log.record("in", self.peer, frame)
        msg = Message.decode(frame)
        if msg.run_id != self.run_id:
            raise DataError(f"reply for run {msg.run_id!r} on channel of run {self.run_id!r}")
        return msg

    def request(self, kind: str, fields: dict | None = None, payload: bytes = b"") -> Message:
        return self.receive(self.handler(self.send(kind, fields, payload)))


class SequenceCounter:
    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            self._n += 1
            return self._n
