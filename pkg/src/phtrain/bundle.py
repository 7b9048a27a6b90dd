"""Train bundles (manifest + parameter snapshot) and the versioned Train registry.

Container layout, all integers big-endian::

    b"PHTB" 0x01
    member*  := u16 name length | name (UTF-8) | u64 data length | data
    members  := "manifest.json", "params.bin" [, "optim.bin"], "digest"

The ``digest`` member holds ``"sha256:" + hex`` over every byte that precedes
the digest member, so any flipped bit is either a parse failure or a digest
mismatch; both raise :class:`TamperError`.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NotFoundError, PHTError, RouteError, TamperError
from .learner import AdamState, ModelParameters, TrainingConfig, decode_parameters, encode_parameters, init_parameters
from .preprocess import AugmentConfig

MAGIC = b"PHTB\x01"
DIGEST_ALGORITHM = "sha256"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden_units: int = 0

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "num_classes": self.num_classes, "hidden_units": self.hidden_units}


@dataclass(frozen=True)
class TaskSpec:
    """Everything a station needs to run the analytic task."""

    training: TrainingConfig
    augment: AugmentConfig
    model: ModelSpec

    def to_dict(self) -> dict:
        return {"training": self.training.to_dict(), "augment": self.augment.to_dict(), "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(TrainingConfig.from_dict(d["training"]), AugmentConfig.from_dict(d["augment"]), ModelSpec(**d["model"]))


@dataclass(frozen=True)
class TrainManifest:
    train_id: str
    task: TaskSpec
    route: tuple[str, ...]
    cycles: int = 1
    cursor: int = 0
    provenance: tuple[dict, ...] = ()
    failures: tuple[dict, ...] = ()
    init_seed: int = 0
    digest_algorithm: str = DIGEST_ALGORITHM

    @property
    def total_visits(self) -> int:
        return len(self.route) * self.cycles

    @property
    def pending_visits(self) -> int:
        return self.total_visits - self.cursor

    @property
    def is_complete(self) -> bool:
        return self.cursor >= self.total_visits

    @property
    def next_station(self) -> str | None:
        return None if self.is_complete else self.route[self.cursor % len(self.route)]

    @property
    def current_cycle(self) -> int:
        return self.cursor // len(self.route)

    def to_dict(self) -> dict:
        return {
            "train_id": self.train_id,
            "task": self.task.to_dict(),
            "route": list(self.route),
            "cycles": self.cycles,
            "cursor": self.cursor,
            "provenance": list(self.provenance),
            "failures": list(self.failures),
            "init_seed": self.init_seed,
            "digest_algorithm": self.digest_algorithm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainManifest":
        return cls(
            train_id=d["train_id"],
            task=TaskSpec.from_dict(d["task"]),
            route=tuple(d["route"]),
            cycles=d["cycles"],
            cursor=d["cursor"],
            provenance=tuple(d["provenance"]),
            failures=tuple(d.get("failures", ())),
            init_seed=d.get("init_seed", 0),
            digest_algorithm=d.get("digest_algorithm", DIGEST_ALGORITHM),
        )

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _member(name: str, data: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw + struct.pack(">Q", len(data)) + data


def _encode_optimizer(state: AdamState) -> bytes:
    m = np.ascontiguousarray(state.m, dtype="<f8")
    v = np.ascontiguousarray(state.v, dtype="<f8")
    return struct.pack(">QQ", state.step, m.size) + m.tobytes() + v.tobytes()


def _decode_optimizer(data: bytes) -> AdamState:
    step, n = struct.unpack(">QQ", data[:16])
    if len(data) != 16 + 16 * n:
        raise DataError("bad optimizer state length")
    m = np.frombuffer(data, dtype="<f8", count=n, offset=16).astype(np.float64)
    v = np.frombuffer(data, dtype="<f8", count=n, offset=16 + 8 * n).astype(np.float64)
    return AdamState(m, v, step)


@dataclass(frozen=True, eq=False)
class TrainBundle:
    manifest: TrainManifest
    parameters: ModelParameters
    digest: str = ""
    optimizer_state: AdamState | None = None

    @classmethod
    def build(cls, manifest, parameters, optimizer_state=None) -> "TrainBundle":
        unsigned = cls(manifest, parameters, "", optimizer_state)
        return replace(unsigned, digest=unsigned.compute_digest())

    def _body(self) -> bytes:
        body = MAGIC + _member("manifest.json", self.manifest.to_json()) + _member("params.bin", encode_parameters(self.parameters))
        if self.optimizer_state is not None:
            body += _member("optim.bin", _encode_optimizer(self.optimizer_state))
        return body

    def compute_digest(self) -> str:
        return f"{DIGEST_ALGORITHM}:{hashlib.sha256(self._body()).hexdigest()}"

    def verify(self) -> "TrainBundle":
        if self.compute_digest() != self.digest:
            raise TamperError(f"digest mismatch for train {self.manifest.train_id!r}")
        return self

    def to_bytes(self) -> bytes:
        body = self._body()
        digest = f"{DIGEST_ALGORITHM}:{hashlib.sha256(body).hexdigest()}"
        if digest != self.digest:
            raise TamperError(f"refusing to serialize train {self.manifest.train_id!r}: digest mismatch")
        return body + _member("digest", digest.encode("ascii"))

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrainBundle":
        try:
            return cls._parse(bytes(data))
        except TamperError:
            raise
        except Exception as exc:  # any structural damage counts as tampering
            raise TamperError(f"corrupt bundle: {exc}") from exc

    @classmethod
    def _parse(cls, data: bytes) -> "TrainBundle":
        if not data.startswith(MAGIC):
            raise TamperError("bad bundle magic")
        pos = len(MAGIC)
        members = {}
        order = []
        digest_start = None
        while pos < len(data):
            start = pos
            (nlen,) = struct.unpack_from(">H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (dlen,) = struct.unpack_from(">Q", data, pos)
            pos += 8
            if pos + dlen > len(data):
                raise TamperError("truncated member")
            members[name] = data[pos : pos + dlen]
            order.append(name)
            pos += dlen
            if name == "digest":
                digest_start = start
        expected = ["manifest.json", "params.bin", "digest"]
        if "optim.bin" in members:
            expected.insert(2, "optim.bin")
        if order != expected or pos != len(data):
            raise TamperError(f"unexpected bundle members {order}")
        digest = members["digest"].decode("ascii")
        actual = f"{DIGEST_ALGORITHM}:{hashlib.sha256(data[:digest_start]).hexdigest()}"
        if digest != actual:
            raise TamperError("digest mismatch")
        manifest = TrainManifest.from_dict(json.loads(members["manifest.json"]))
        params = decode_parameters(members["params.bin"])
        optim = _decode_optimizer(members["optim.bin"]) if "optim.bin" in members else None
        bundle = cls(manifest, params, digest, optim)
        if bundle.to_bytes() != data:
            raise TamperError("non-canonical bundle encoding")
        return bundle

    # convenience passthroughs
    @property
    def train_id(self) -> str:
        return self.manifest.train_id

    @property
    def is_complete(self) -> bool:
        return self.manifest.is_complete

    @property
    def next_station(self) -> str | None:
        return self.manifest.next_station

    @property
    def version(self) -> int:
        return self.parameters.version

    def __eq__(self, other):
        if not isinstance(other, TrainBundle):
            return NotImplemented
        return self.digest == other.digest and self.to_bytes() == other.to_bytes()

    __hash__ = None


def create_train(task: TaskSpec, route: Sequence[str], cycles: int = 1, seed: int = 0, train_id: str | None = None) -> TrainBundle:
    route = tuple(route)
    if not route:
        raise ConfigurationError("route must not be empty")
    if not (isinstance(cycles, int) and cycles >= 1):
        raise ConfigurationError("cycles must be >= 1")
    params = init_parameters(task.model.input_dim, task.model.num_classes, task.model.hidden_units, seed)
    manifest = TrainManifest(
        train_id=train_id or f"train-{seed}",
        task=task,
        route=route,
        cycles=cycles,
        init_seed=seed,
    )
    return TrainBundle.build(manifest, params)


def visit_record(station_id: str, *, epochs: int, final_loss, wall_time: float, **extra) -> dict:
    rec = {"station_id": station_id, "epochs": epochs, "final_loss": final_loss, "wall_time": wall_time}
    rec.update(extra)
    return rec


def commit(bundle: TrainBundle, new_params: ModelParameters, record: dict, optimizer_state: AdamState | None = None) -> TrainBundle:
    """Snapshot a completed visit into a new bundle; ``bundle`` is left untouched."""
    bundle.verify()
    if bundle.is_complete:
        raise RouteError(f"train {bundle.train_id!r} has already completed its route")
    if new_params.shapes != bundle.parameters.shapes:
        raise ConfigurationError("committed parameters do not match the train's model shape")
    m = bundle.manifest
    manifest = replace(m, cursor=m.cursor + 1, provenance=m.provenance + (dict(record),))
    params = new_params.with_values(new_params.values.copy(), version=bundle.parameters.version + 1)
    return TrainBundle.build(manifest, params, optimizer_state)


def record_failure(bundle: TrainBundle, record: dict) -> TrainBundle:
    """Bundle with unchanged parameters and cursor and one more failure entry."""
    bundle.verify()
    manifest = replace(bundle.manifest, failures=bundle.manifest.failures + (dict(record),))
    return TrainBundle.build(manifest, bundle.parameters, bundle.optimizer_state)


@dataclass
class _History:
    versions: list[bytes] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class TrainRegistry:
    """In-memory Train repository keeping every pushed version.

    Pushes are serialized per train id; a push whose parameter version is not
    newer than the latest stored one, or whose provenance does not extend the
    latest provenance, is rejected.
    """

    def __init__(self):
        self._trains: dict[str, _History] = {}
        self._lock = threading.Lock()

    def push(self, bundle: TrainBundle | bytes) -> int:
        data = bundle if isinstance(bundle, (bytes, bytearray)) else bundle.to_bytes()
        parsed = TrainBundle.from_bytes(data)
        with self._lock:
            hist = self._trains.setdefault(parsed.train_id, _History())
        with hist.lock:
            if hist.versions:
                latest = TrainBundle.from_bytes(hist.versions[-1])
                if parsed.version <= latest.version:
                    raise PHTError(
                        f"out-of-order push for {parsed.train_id!r}: version {parsed.version} <= {latest.version}"
                    )
                if parsed.manifest.provenance[: len(latest.manifest.provenance)] != latest.manifest.provenance:
                    raise PHTError(f"push for {parsed.train_id!r} rewrites provenance")
            hist.versions.append(bytes(data))
            return len(hist.versions)

    def _history(self, train_id: str) -> _History:
        try:
            return self._trains[train_id]
        except KeyError:
            raise NotFoundError(f"unknown train {train_id!r}") from None

    def pull_bytes(self, train_id: str, version: int | None = None) -> bytes:
        hist = self._history(train_id)
        with hist.lock:
            if version is None:
                return hist.versions[-1]
            if not 1 <= version <= len(hist.versions):
                raise NotFoundError(f"train {train_id!r} has no registry version {version}")
            return hist.versions[version - 1]

    def pull(self, train_id: str, version: int | None = None) -> TrainBundle:
        return TrainBundle.from_bytes(self.pull_bytes(train_id, version))

    def history(self, train_id: str) -> list[dict[str, Any]]:
        hist = self._history(train_id)
        with hist.lock:
            out = []
            for i, data in enumerate(hist.versions, start=1):
                b = TrainBundle.from_bytes(data)
                out.append(
                    {
                        "registry_version": i,
                        "parameters_version": b.version,
                        "cursor": b.manifest.cursor,
                        "provenance_length": len(b.manifest.provenance),
                        "digest": b.digest,
                    }
                )
            return out

    def __contains__(self, train_id):
        return train_id in self._trains

    def train_ids(self) -> list[str]:
        return sorted(self._trains)


def push(registry: TrainRegistry, bundle: TrainBundle) -> int:
    return registry.push(bundle)


def pull(registry: TrainRegistry, train_id: str) -> TrainBundle:
    return registry.pull(train_id)
