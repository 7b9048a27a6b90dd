import dataclasses

import numpy as np
import pytest

from phtrain.bundle import TrainRegistry
from phtrain.errors import ConfigurationError, DataError, StationFailure
from phtrain.learner import AdamState, adam_step, init_parameters, loss_and_gradient
from phtrain.messages import Message, WireLog
from phtrain.metrics import loss_trace_report
from phtrain.orchestrator import (
    ExperimentPlan,
    Policy,
    RunRecord,
    aggregate,
    run_fl,
    run_iil,
    run_plan,
)
from phtrain.partition import DatasetShard
from phtrain.preprocess import AugmentConfig, encode_png
from phtrain.station import Station, local_fit

from conftest import tiny_task, tiny_world


# --------------------------------------------------------------------------- aggregate


def test_aggregate_weighted_examples():
    assert aggregate([[0.0], [4.0]], [1, 3]).values.tolist() == [3.0]
    assert aggregate([[1.0], [3.0]]).values.tolist() == [2.0]
    assert aggregate([[6.0], [3.0], [2.0]], [1, 2, 3]).values[0] == pytest.approx(3.0, abs=1e-15)


def test_aggregate_identical_replicas_exact():
    p = init_parameters(5, 3, 2, seed=1)
    p = p.with_values(np.random.default_rng(0).normal(size=len(p)))
    out = aggregate([p, p, p], [5, 1, 7])
    assert out.values.tobytes() == p.values.tobytes()
    assert out.shapes == p.shapes


@pytest.mark.parametrize(
    "replicas, weights",
    [([], None), ([[1.0], [1.0, 2.0]], None), ([[1.0], [2.0]], [1.0]), ([[1.0], [2.0]], [0, 0]), ([[1.0], [2.0]], [-1, 2])],
)
def test_aggregate_errors(replicas, weights):
    with pytest.raises(ConfigurationError):
        aggregate(replicas, weights)


# --------------------------------------------------------------------------- plans


def test_plan_validation():
    with pytest.raises(ConfigurationError):
        ExperimentPlan(Policy.IIL, ("a",), cycles=2)
    with pytest.raises(ConfigurationError):
        ExperimentPlan(Policy.IIL, ())
    with pytest.raises(ConfigurationError):
        ExperimentPlan(Policy.FL, ("a",), rounds=0)
    with pytest.raises(ValueError):
        ExperimentPlan("Gossip", ("a",))
    assert ExperimentPlan("CyclicIIL", ("a", "b"), cycles=3).cycles == 3


# --------------------------------------------------------------------------- degenerate equivalences


def test_iil_single_station_matches_local_training(world):
    stations, test, *_ = world
    task = tiny_task(epochs=3)
    rec = run_iil(ExperimentPlan(Policy.IIL, ("station-0",), seed=4), task, stations, TrainRegistry())
    train, val = stations["station-0"].load(4)
    m = task.model
    direct = local_fit(init_parameters(m.input_dim, m.num_classes, m.hidden_units, 4), train, val, task.training, task.augment)
    assert rec.final_params.values.tobytes() == direct.params.values.tobytes()
    assert rec.segments[0].parts[0].losses == direct.losses


def test_fl_single_station_matches_iil(world):
    stations = world[0]
    task = tiny_task(epochs=3)
    iil = run_iil(ExperimentPlan(Policy.IIL, ("station-1",)), task, stations, TrainRegistry())
    fl = run_fl(ExperimentPlan(Policy.FL, ("station-1",), rounds=1, weighting="uniform"), task, stations, TrainRegistry())
    assert fl.final_params.values.tobytes() == iil.final_params.values.tobytes()


def test_centralized_on_one_station_matches_iil(world):
    stations = world[0]
    task = tiny_task(epochs=3)
    iil = run_iil(ExperimentPlan(Policy.IIL, ("station-2",)), task, stations, TrainRegistry())
    cen = run_plan(ExperimentPlan(Policy.CENTRALIZED, ("station-2",)), task, stations, TrainRegistry())
    assert cen.final_params.values.tobytes() == iil.final_params.values.tobytes()


def identical_data_stations(n_stations=3, n=24):
    _, _, images, labels, shards = tiny_world(n=96)
    ids = tuple(sorted(shards[0].train)[:n])
    out = {}
    for k in range(n_stations):
        st = Station(f"station-{k}", clock=lambda: 0.0)
        st.ingest(DatasetShard(f"station-{k}", ids, ()), images, labels)
        out[st.station_id] = st
    return out, ids


def test_fl_identical_data_equals_full_batch_step():
    stations, ids = identical_data_stations()
    n = len(ids)
    task = tiny_task(epochs=1, lr=1e-2, weight_decay=5e-4)
    task = dataclasses.replace(task, augment=AugmentConfig.identity(4), training=dataclasses.replace(task.training, batch_size=n))
    rounds = 50
    reg = TrainRegistry()
    rec = run_fl(ExperimentPlan(Policy.FL, tuple(stations), rounds=rounds), task, stations, reg)
    assert not rec.aborted

    train, _ = stations["station-0"].load(4)
    x = np.concatenate([train.features()] * 3)
    y = np.concatenate([train.labels] * 3)
    m = task.model
    theta = init_parameters(m.input_dim, m.num_classes, m.hidden_units, 0).values
    for r in range(rounds):
        _, g = loss_and_gradient(init_parameters(m.input_dim, m.num_classes).with_values(theta), x, y)
        theta, _ = adam_step(theta, g, AdamState.zeros(theta.size), task.training)
        got = reg.pull(rec.train_id, r + 2).parameters.values
        assert np.abs(got - theta).max() <= 1e-10


# --------------------------------------------------------------------------- traces, events, hops


def test_iil_three_stations_hops_at_forty_and_eighty(world):
    stations = world[0]
    task = tiny_task(epochs=40, lr=1e-3)
    rec = run_iil(ExperimentPlan(Policy.IIL, tuple(stations)), task, stations, TrainRegistry())
    assert rec.hop_epochs() == [40, 80]
    rows = loss_trace_report(rec)
    assert len(rows) == 120
    assert [r.epoch for r in rows if r.marker] == [40, 80]
    assert rows[39].marker == "hop:station-0->station-1"
    kinds = [e["kind"] for e in rec.events]
    assert kinds.count("visit_start") == 3 and kinds[0] == "start" and kinds[-1] == "end"


def test_centralized_trace_has_no_markers(world):
    stations, test, *_ = world
    rec = run_plan(ExperimentPlan(Policy.CENTRALIZED, tuple(stations), local_epochs=5), tiny_task(), stations, TrainRegistry(), test=test)
    rows = loss_trace_report(rec)
    assert len(rows) == 5 and not any(r.marker for r in rows)
    assert set(rec.final_test) >= {"mean_accuracy", "mean_recall"}


def test_empty_record_empty_trace():
    assert loss_trace_report(RunRecord(Policy.IIL, 0, "x")) == []


def test_cyclic_route_order(world):
    stations = world[0]
    reg = TrainRegistry()
    rec = run_iil(ExperimentPlan(Policy.CYCLIC_IIL, ("station-0", "station-1"), cycles=2), tiny_task(epochs=1), stations, reg)
    assert [s.parts[0].station_id for s in rec.segments] == ["station-0", "station-1"] * 2
    hist = reg.history(rec.train_id)
    assert [h["provenance_length"] for h in hist] == [0, 1, 2, 3, 4]


def test_fl_rounds_and_determinism(world):
    stations = world[0]
    plan = ExperimentPlan(Policy.FL, tuple(stations), rounds=3, local_epochs=1)
    a = run_fl(plan, tiny_task(), stations, TrainRegistry())
    b = run_fl(plan, tiny_task(), stations, TrainRegistry())
    assert a.final_params.values.tobytes() == b.final_params.values.tobytes()
    assert a.hop_epochs() == [1, 2]
    assert [r.marker for r in loss_trace_report(a)] == ["round:1", "round:2", ""]


# --------------------------------------------------------------------------- failures


def break_station(station):
    media = station.store.resources.all("Media")[0]
    station.store.objects.delete(media.content_url)
    return media.id


def test_iil_aborts_with_partial_record(world):
    stations = world[0]
    mid = break_station(stations["station-1"])
    rec = run_iil(ExperimentPlan(Policy.IIL, tuple(stations)), tiny_task(), stations, TrainRegistry())
    assert rec.aborted and len(rec.segments) == 1
    assert "station-1" in rec.error and mid in rec.error
    assert rec.final_test is None
    with pytest.raises(StationFailure):
        run_iil(ExperimentPlan(Policy.IIL, tuple(stations)), tiny_task(), stations, TrainRegistry(), fail_fast=True)


def test_fl_round_aborts_on_replica_failure(world):
    stations = world[0]
    break_station(stations["station-2"])
    rec = run_fl(ExperimentPlan(Policy.FL, tuple(stations), rounds=2), tiny_task(), stations, TrainRegistry())
    assert rec.aborted and rec.segments == [] and "station-2" in rec.error


def test_centralized_empty_pool():
    from phtrain.orchestrator import run_centralized
    from phtrain.station import PreparedData

    empty = PreparedData(np.zeros((0, 4, 4, 3), np.uint8), np.zeros(0, np.int64))
    with pytest.raises(DataError):
        run_centralized(ExperimentPlan(Policy.CENTRALIZED), tiny_task(), empty)


# --------------------------------------------------------------------------- data locality


def test_no_data_leaves_stations(world):
    stations, test, images, labels, shards = world
    wire, reg = WireLog(), TrainRegistry()
    task = tiny_task(epochs=2)
    run_iil(ExperimentPlan(Policy.IIL, tuple(stations)), task, stations, reg, wire_log=wire)
    run_fl(ExperimentPlan(Policy.FL, tuple(stations), rounds=2), task, stations, reg, wire_log=wire)
    assert len(wire) > 0

    needles = []
    for st in stations.values():
        needles += [st.store.objects.get(k) for k in st.store.objects.keys()]
        train, val = st.load(4)
        needles += [train.pixels.tobytes(), train.labels.tobytes(), train.labels.astype(np.uint8).tobytes()]
        needles += [px.tobytes() for px in train.pixels]
    needles += [im.data for im in images.values()] + [encode_png(im) for im in images.values()]

    blobs = [frame for _, _, frame in wire]
    for tid in reg.train_ids():
        blobs += [reg.pull_bytes(tid, h["registry_version"]) for h in reg.history(tid)]
    for blob in blobs:
        for needle in needles:
            assert needle not in blob
        header = Message.decode(blob).fields if blob[:4] != b"PHTB" else {}
        assert "labels" not in header


def test_wire_log_sequence_is_monotone(world):
    stations = world[0]
    wire = WireLog()
    run_iil(ExperimentPlan(Policy.IIL, tuple(stations)), tiny_task(epochs=1), stations, TrainRegistry(), wire_log=wire)
    heads = wire.headers()
    assert [h["type"] for h in heads] == ["ExecuteTrain", "TrainResult"] * 3
    out_seqs = [h["seq"] for h in heads if h["direction"] == "out"]
    assert out_seqs == sorted(out_seqs) and len(set(out_seqs)) == 3
