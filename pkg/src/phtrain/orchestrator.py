"""Experiment policies: sequential (cyclic) IIL, parallel FL with weighted
parameter averaging, and the centralized baseline."""

from __future__ import annotations

import enum
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics
from .bundle import TaskSpec, TrainBundle, TrainRegistry, commit, create_train, visit_record
from .errors import ConfigurationError, DataError, PHTError, StationFailure
from .learner import LocalResult, ModelParameters, evaluate_params, init_parameters
from .messages import (
    BROADCAST,
    EXECUTE_TRAIN,
    PULL_TRAIN,
    REPLICA_RESULT,
    TRAIN_RESULT,
    Channel,
    Message,
    SequenceCounter,
    WireLog,
)
from .station import PreparedData, Station, local_fit

AGGREGATOR = "aggregator"


class Policy(str, enum.Enum):
    IIL = "IIL"
    CYCLIC_IIL = "CyclicIIL"
    FL = "FL"
    CENTRALIZED = "Centralized"


class Weighting(str, enum.Enum):
    UNIFORM = "uniform"
    BY_SAMPLE_COUNT = "by_sample_count"


@dataclass(frozen=True)
class ExperimentPlan:
    policy: Policy
    station_ids: tuple[str, ...] = ()
    cycles: int = 1
    rounds: int = 1
    local_epochs: int | None = None
    weighting: Weighting = Weighting.BY_SAMPLE_COUNT
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        object.__setattr__(self, "station_ids", tuple(self.station_ids))
        if self.policy in (Policy.IIL, Policy.CYCLIC_IIL):
            if not self.station_ids:
                raise ConfigurationError("IIL requires a non-empty route")
            if not (isinstance(self.cycles, int) and self.cycles >= 1):
                raise ConfigurationError("IIL requires cycles >= 1")
            if self.policy is Policy.IIL and self.cycles != 1:
                raise ConfigurationError("single-pass IIL has exactly one cycle; use CyclicIIL")
        if self.policy is Policy.FL:
            if not self.station_ids:
                raise ConfigurationError("FL requires at least one station")
            if not (isinstance(self.rounds, int) and self.rounds >= 1):
                raise ConfigurationError("FL requires rounds >= 1")
        if self.local_epochs is not None and not (isinstance(self.local_epochs, int) and self.local_epochs >= 0):
            raise ConfigurationError("local_epochs must be a non-negative integer")

    def task_for(self, task: TaskSpec) -> TaskSpec:
        if self.local_epochs is None:
            return task
        return replace(task, training=replace(task.training, epochs=self.local_epochs))


# --------------------------------------------------------------------------- run record


@dataclass
class Part:
    station_id: str
    sample_count: int
    losses: list[float]
    validation: list[dict]


@dataclass
class Segment:
    """One IIL visit, one FL round, or the single centralized fit."""

    kind: str
    index: int
    parts: list[Part]

    def combined(self) -> tuple[list[float], list[dict | None]]:
        if len(self.parts) == 1:
            p = self.parts[0]
            return list(p.losses), list(p.validation)
        w = np.array([p.sample_count for p in self.parts], dtype=np.float64)
        w = w / w.sum()
        n = min(len(p.losses) for p in self.parts)
        losses = [float(sum(wi * p.losses[e] for wi, p in zip(w, self.parts))) for e in range(n)]
        vals: list[dict | None] = []
        for e in range(n):
            if all(e < len(p.validation) for p in self.parts):
                vals.append(
                    {
                        key: float(sum(wi * p.validation[e][key] for wi, p in zip(w, self.parts)))
                        for key in ("mean_accuracy", "mean_recall")
                    }
                )
            else:
                vals.append(None)
        return losses, vals

    def boundary_marker(self, following: "Segment") -> str:
        if self.kind == "visit":
            return f"hop:{self.parts[0].station_id}->{following.parts[0].station_id}"
        if self.kind == "round":
            return f"round:{self.index + 1}"
        return ""


@dataclass
class RunRecord:
    policy: Policy
    seed: int
    run_id: str
    segments: list[Segment] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    final_test: dict | None = None
    final_params: ModelParameters | None = None
    train_id: str | None = None
    aborted: bool = False
    error: str | None = None

    @property
    def losses(self) -> list[float]:
        return [row.loss for row in metrics.loss_trace_report(self)]

    def hop_epochs(self) -> list[int]:
        return [e["global_epoch"] for e in self.events if e["kind"] in ("hop", "round_end") and e.get("boundary")]

    def summary(self) -> dict:
        return {
            "policy": self.policy.value,
            "seed": self.seed,
            "run_id": self.run_id,
            "aborted": self.aborted,
            "error": self.error,
            "epochs": len(metrics.loss_trace_report(self)),
            "final_test": self.final_test,
        }


class EventLog:
    def __init__(self, record: RunRecord, clock: Callable[[], float]):
        self.record = record
        self.clock = clock
        self._seq = itertools.count(1)

    def emit(self, kind: str, **fields) -> None:
        self.record.events.append({"seq": next(self._seq), "kind": kind, "t": self.clock(), **fields})


def logical_clock() -> Callable[[], float]:
    """Deterministic stand-in for wall time: 0.0, 1.0, 2.0, ..."""
    counter = itertools.count()
    return lambda: float(next(counter))


# --------------------------------------------------------------------------- aggregation


def aggregate(replicas: Sequence, weights: Sequence[float] | None = None) -> ModelParameters:
    """Element-wise weighted mean; weights are normalized internally.

    Computed as ``x0 + sum_i w_i (x_i - x0)`` so identical replicas come back bit-exact.
    """
    if not replicas:
        raise ConfigurationError("nothing to aggregate")
    arrays = [r.values if isinstance(r, ModelParameters) else np.asarray(r, dtype=np.float64).ravel() for r in replicas]
    if len({a.size for a in arrays}) != 1:
        raise ConfigurationError("replica parameter lengths differ")
    w = np.ones(len(arrays)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(arrays),):
        raise ConfigurationError("one weight per replica required")
    if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
        raise ConfigurationError("weights must be finite, non-negative and not all zero")
    w = w / w.sum()
    base = arrays[0]
    acc = np.zeros_like(base)
    for wi, a in zip(w, arrays):
        acc += wi * (a - base)
    out = base + acc
    template = next((r for r in replicas if isinstance(r, ModelParameters)), None)
    if template is None:
        return ModelParameters(out, (("values", (out.size,)),), 1)
    return template.with_values(out)


# --------------------------------------------------------------------------- station endpoint


class StationService:
    """Message-level wrapper around a Station (the station's side of the wire)."""

    def __init__(self, station: Station, registry: TrainRegistry | None = None):
        self.station = station
        self.registry = registry

    @property
    def station_id(self) -> str:
        return self.station.station_id

    def handle(self, frame: bytes) -> bytes:
        msg = Message.decode(frame)
        if msg.type == EXECUTE_TRAIN:
            return self._execute(msg, TrainBundle.from_bytes(msg.payload))
        if msg.type == PULL_TRAIN:
            if self.registry is None:
                return self._reply(msg, TRAIN_RESULT, {"failure": "station has no registry access"})
            try:
                bundle = self.registry.pull(msg.fields["train_id"])
            except PHTError as exc:
                return self._reply(msg, TRAIN_RESULT, {"failure": str(exc)})
            reply = self._execute(msg, bundle)
            result = Message.decode(reply)
            if "failure" not in result.fields:
                self.registry.push(result.payload)
            return reply
        if msg.type == BROADCAST:
            return self._replica(msg)
        return self._reply(msg, TRAIN_RESULT, {"failure": f"unexpected message {msg.type}"})

    def _reply(self, msg: Message, kind: str, fields: dict, payload: bytes = b"") -> bytes:
        return Message(kind, msg.run_id, msg.seq, {"station_id": self.station_id, **fields}, payload).encode()

    def _execute(self, msg: Message, bundle: TrainBundle) -> bytes:
        try:
            out = self.station.execute_train(bundle)
        except PHTError as exc:
            return self._reply(msg, TRAIN_RESULT, {"failure": f"{type(exc).__name__}: {exc}"})
        if len(out.manifest.failures) > len(bundle.manifest.failures):
            return self._reply(msg, TRAIN_RESULT, {"failure": out.manifest.failures[-1]["error"]}, out.to_bytes())
        return self._reply(msg, TRAIN_RESULT, {}, out.to_bytes())

    def _replica(self, msg: Message) -> bytes:
        rnd = msg.fields["round"]
        task = TaskSpec.from_dict(msg.fields["task"])
        try:
            params = ModelParameters.from_bytes(msg.payload)
            result, n = self.station.fit(params, task, epoch_offset=rnd * task.training.epochs)
        except (PHTError, FloatingPointError) as exc:
            return self._reply(msg, REPLICA_RESULT, {"round": rnd, "failure": f"{type(exc).__name__}: {exc}"})
        fields = {"round": rnd, "sample_count": n, "losses": result.losses, "validation": result.validation}
        return self._reply(msg, REPLICA_RESULT, fields, result.params.to_bytes())


def _services(stations) -> dict[str, StationService]:
    if isinstance(stations, Mapping):
        items = stations.values()
    else:
        items = stations
    out = {}
    for s in items:
        svc = s if isinstance(s, StationService) else StationService(s)
        out[svc.station_id] = svc
    return out


class Orchestrator:
    """Holds the wire log and channels for one run."""

    def __init__(self, run_id: str, stations, *, clock: Callable[[], float] | None = None, wire_log: WireLog | None = None):
        self.run_id = run_id
        self.services = _services(stations)
        self.clock = clock or logical_clock()
        self.wire_log = wire_log if wire_log is not None else WireLog()
        counter = SequenceCounter()
        self.channels = {
            sid: Channel(run_id, sid, svc.handle, self.wire_log, counter) for sid, svc in self.services.items()
        }

    def channel(self, station_id: str) -> Channel:
        try:
            return self.channels[station_id]
        except KeyError:
            raise ConfigurationError(f"unknown station {station_id!r}") from None


def _evaluate(params: ModelParameters, test: PreparedData | None) -> dict | None:
    if test is None or len(test) == 0:
        return None
    return evaluate_params(params, test.features(), test.labels)


def run_iil(
    plan: ExperimentPlan,
    task: TaskSpec,
    stations,
    registry: TrainRegistry,
    *,
    test: PreparedData | None = None,
    run_id: str | None = None,
    clock: Callable[[], float] | None = None,
    wire_log: WireLog | None = None,
    fail_fast: bool = False,
) -> RunRecord:
    """Sequential visits ``route x cycles``; each visit is pull -> execute -> push.

    A failing station stops the run; the returned record is partial and marked
    ``aborted`` (or :class:`StationFailure` is raised when ``fail_fast``).
    """
    if plan.policy not in (Policy.IIL, Policy.CYCLIC_IIL):
        raise ConfigurationError(f"run_iil cannot execute policy {plan.policy.value}")
    run_id = run_id or f"{plan.policy.value.lower()}-{plan.seed}"
    orch = Orchestrator(run_id, stations, clock=clock, wire_log=wire_log)
    for sid in plan.station_ids:
        orch.channel(sid)
    task = plan.task_for(task)
    epochs = task.training.epochs
    record = RunRecord(plan.policy, plan.seed, run_id)
    events = EventLog(record, orch.clock)

    bundle = create_train(task, plan.station_ids, plan.cycles, seed=plan.seed, train_id=f"{run_id}-train")
    registry.push(bundle)
    record.train_id = bundle.train_id
    events.emit("start", policy=plan.policy.value, route=list(plan.station_ids), cycles=plan.cycles, global_epoch=0)

    total = bundle.manifest.total_visits
    for visit in range(total):
        sid = plan.station_ids[visit % len(plan.station_ids)]
        current = registry.pull(bundle.train_id)
        events.emit("visit_start", station=sid, visit=visit, global_epoch=visit * epochs)
        reply = orch.channel(sid).request(EXECUTE_TRAIN, {"train_id": current.train_id}, current.to_bytes())
        if "failure" in reply.fields:
            record.aborted = True
            record.error = f"{sid}: {reply.fields['failure']}"
            record.final_params = current.parameters
            events.emit("abort", station=sid, visit=visit, error=record.error, global_epoch=visit * epochs)
            if fail_fast:
                raise StationFailure(record.error, record)
            return record
        committed = TrainBundle.from_bytes(reply.payload)
        registry.push(committed)
        prov = committed.manifest.provenance[-1]
        record.segments.append(Segment("visit", visit, [Part(sid, prov["train_samples"], prov["losses"], prov["validation"])]))
        boundary = visit < total - 1
        events.emit("visit_end", station=sid, visit=visit, global_epoch=(visit + 1) * epochs, final_loss=prov["final_loss"])
        if boundary:
            nxt = plan.station_ids[(visit + 1) % len(plan.station_ids)]
            events.emit("hop", boundary=True, source=sid, target=nxt, global_epoch=(visit + 1) * epochs)

    final = registry.pull(bundle.train_id)
    record.final_params = final.parameters
    record.final_test = _evaluate(final.parameters, test)
    events.emit("end", global_epoch=total * epochs)
    return record


def run_fl(
    plan: ExperimentPlan,
    task: TaskSpec,
    stations,
    registry: TrainRegistry,
    *,
    test: PreparedData | None = None,
    run_id: str | None = None,
    clock: Callable[[], float] | None = None,
    wire_log: WireLog | None = None,
    max_workers: int | None = None,
    fail_fast: bool = False,
) -> RunRecord:
    """Rounds of broadcast -> concurrent local training -> weighted averaging.

    Aggregation is a barrier: every replica of round r is collected before
    round r+1 is broadcast. Replicas start each round with fresh optimizer state.
    """
    if plan.policy is not Policy.FL:
        raise ConfigurationError(f"run_fl cannot execute policy {plan.policy.value}")
    run_id = run_id or f"fl-{plan.seed}"
    orch = Orchestrator(run_id, stations, clock=clock, wire_log=wire_log)
    channels = [orch.channel(sid) for sid in plan.station_ids]
    task = plan.task_for(task)
    epochs = task.training.epochs
    record = RunRecord(plan.policy, plan.seed, run_id)
    events = EventLog(record, orch.clock)

    bundle = create_train(task, (AGGREGATOR,), plan.rounds, seed=plan.seed, train_id=f"{run_id}-train")
    registry.push(bundle)
    record.train_id = bundle.train_id
    events.emit("start", policy=plan.policy.value, stations=list(plan.station_ids), rounds=plan.rounds, global_epoch=0)
    task_doc = task.to_dict()

    workers = max_workers or len(channels)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for rnd in range(plan.rounds):
            current = registry.pull(bundle.train_id)
            events.emit("round_start", round=rnd, global_epoch=rnd * epochs)
            payload = current.parameters.to_bytes()
            frames = [ch.send(BROADCAST, {"round": rnd, "task": task_doc}, payload) for ch in channels]
            replies = list(pool.map(lambda cf: cf[0].handler(cf[1]), zip(channels, frames)))
            msgs = [ch.receive(reply) for ch, reply in zip(channels, replies)]

            failed = [(ch.peer, m.fields["failure"]) for ch, m in zip(channels, msgs) if "failure" in m.fields]
            if failed:
                record.aborted = True
                record.error = "; ".join(f"{sid}: {err}" for sid, err in failed)
                record.final_params = current.parameters
                events.emit("abort", round=rnd, error=record.error, global_epoch=rnd * epochs)
                if fail_fast:
                    raise StationFailure(record.error, record)
                return record

            replicas = [ModelParameters.from_bytes(m.payload) for m in msgs]
            counts = [m.fields["sample_count"] for m in msgs]
            weights = counts if plan.weighting is Weighting.BY_SAMPLE_COUNT else None
            merged = aggregate(replicas, weights)
            parts = [Part(ch.peer, m.fields["sample_count"], m.fields["losses"], m.fields["validation"]) for ch, m in zip(channels, msgs)]
            seg = Segment("round", rnd, parts)
            losses, _ = seg.combined()
            rec = visit_record(
                AGGREGATOR,
                epochs=epochs,
                final_loss=losses[-1] if losses else None,
                wall_time=0.0,
                round=rnd,
                replicas=[{"station_id": p.station_id, "sample_count": p.sample_count} for p in parts],
            )
            registry.push(commit(current, merged, rec))
            record.segments.append(seg)
            events.emit("round_end", round=rnd, boundary=rnd < plan.rounds - 1, global_epoch=(rnd + 1) * epochs)

    final = registry.pull(bundle.train_id)
    record.final_params = final.parameters
    record.final_test = _evaluate(final.parameters, test)
    events.emit("end", global_epoch=plan.rounds * epochs)
    return record


def run_centralized(
    plan: ExperimentPlan,
    task: TaskSpec,
    train: PreparedData,
    validation: PreparedData | None = None,
    *,
    test: PreparedData | None = None,
    run_id: str | None = None,
    clock: Callable[[], float] | None = None,
) -> RunRecord:
    """Single local fit on data pooled from all shards."""
    if plan.policy is not Policy.CENTRALIZED:
        raise ConfigurationError(f"run_centralized cannot execute policy {plan.policy.value}")
    if train is None or len(train) == 0:
        raise DataError("pooled training set is empty")
    task = plan.task_for(task)
    run_id = run_id or f"centralized-{plan.seed}"
    record = RunRecord(plan.policy, plan.seed, run_id)
    events = EventLog(record, clock or logical_clock())
    events.emit("start", policy=plan.policy.value, global_epoch=0)
    m = task.model
    params = init_parameters(m.input_dim, m.num_classes, m.hidden_units, plan.seed)
    result: LocalResult = local_fit(params, train, validation, task.training, task.augment)
    record.segments.append(Segment("central", 0, [Part("central", len(train), result.losses, result.validation)]))
    record.final_params = result.params
    record.final_test = _evaluate(result.params, test)
    events.emit("end", global_epoch=task.training.epochs)
    return record


def run_plan(plan: ExperimentPlan, task: TaskSpec, stations, registry: TrainRegistry, *, test=None, **kw) -> RunRecord:
    """Dispatch on ``plan.policy``; Centralized pools the stations' own data."""
    if plan.policy is Policy.FL:
        return run_fl(plan, task, stations, registry, test=test, **kw)
    if plan.policy is Policy.CENTRALIZED:
        services = _services(stations)
        target = task.augment.target_size
        loaded = [services[sid].station.load(target) for sid in (plan.station_ids or sorted(services))]
        train = PreparedData.concat(t for t, _ in loaded)
        val = PreparedData.concat(v for _, v in loaded)
        kw.pop("wire_log", None)
        kw.pop("max_workers", None)
        kw.pop("fail_fast", None)
        return run_centralized(plan, task, train, val, test=test, **kw)
    kw.pop("max_workers", None)
    return run_iil(plan, task, stations, registry, test=test, **kw)
