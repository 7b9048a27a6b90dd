import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phtrain.bundle import (
    TrainBundle,
    TrainRegistry,
    commit,
    create_train,
    pull,
    push,
    record_failure,
    visit_record,
)
from phtrain.errors import ConfigurationError, NotFoundError, PHTError, RouteError, TamperError
from phtrain.learner import AdamState

from conftest import tiny_task


def fresh(route=("A",), cycles=1, seed=0, hidden=0):
    return create_train(tiny_task(hidden=hidden), route, cycles, seed)


def step(bundle, station="A", delta=1.0):
    params = bundle.parameters.with_values(bundle.parameters.values + delta)
    return commit(bundle, params, visit_record(station, epochs=1, final_loss=0.5, wall_time=0.0))


def test_pending_visits():
    assert fresh().manifest.cursor == 0
    assert fresh().manifest.pending_visits == 1
    assert fresh(("A", "B", "C"), 2).manifest.pending_visits == 6


def test_create_rejects_empty_route():
    with pytest.raises(ConfigurationError):
        fresh(())
    with pytest.raises(ConfigurationError):
        fresh(("A",), 0)


def test_same_seed_same_initial_bytes():
    a, b = fresh(seed=5, hidden=3), fresh(seed=5, hidden=3)
    assert a.parameters.to_bytes() == b.parameters.to_bytes()
    assert a.to_bytes() == b.to_bytes()


def test_commit_advances_cursor_and_provenance():
    b0 = fresh()
    b1 = step(b0)
    assert (b1.manifest.cursor, len(b1.manifest.provenance)) == (1, 1)
    assert b1.version == b0.version + 1
    assert b0.manifest.cursor == 0  # original untouched


def test_three_commits_complete_route():
    b = fresh(("A", "B", "C"))
    for s in ("A", "B", "C"):
        assert b.next_station == s
        b = step(b, s)
    assert b.manifest.cursor == 3 and b.is_complete and b.next_station is None
    with pytest.raises(RouteError):
        step(b, "A")


def test_cyclic_route_wraps():
    b = fresh(("A", "B"), cycles=2)
    seen = []
    while not b.is_complete:
        seen.append((b.next_station, b.manifest.current_cycle))
        b = step(b, b.next_station)
    assert seen == [("A", 0), ("B", 0), ("A", 1), ("B", 1)]


def test_tampered_parameters_rejected_by_commit():
    b = fresh()
    forged = TrainBundle(b.manifest, b.parameters.with_values(b.parameters.values + 1), b.digest)
    with pytest.raises(TamperError):
        step(forged)


def test_failure_keeps_parameters_and_cursor():
    b = fresh()
    f = record_failure(b, {"station_id": "A", "error": "boom"})
    assert f.parameters == b.parameters and f.manifest.cursor == 0
    assert f.manifest.failures == ({"station_id": "A", "error": "boom"},)
    assert f.manifest.provenance == ()


def test_round_trip_bytes_with_optimizer_state():
    b = fresh()
    n = len(b.parameters)
    state = AdamState(np.arange(n, dtype=float), np.ones(n), 7)
    b1 = commit(b, b.parameters, visit_record("A", epochs=0, final_loss=None, wall_time=0.0), state)
    back = TrainBundle.from_bytes(b1.to_bytes())
    assert back == b1
    assert back.optimizer_state.step == 7
    np.testing.assert_array_equal(back.optimizer_state.m, state.m)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_any_bit_flip_is_detected(data):
    blob = step(fresh()).to_bytes()
    pos = data.draw(st.integers(0, len(blob) - 1))
    bit = data.draw(st.integers(0, 7))
    damaged = bytearray(blob)
    damaged[pos] ^= 1 << bit
    with pytest.raises(TamperError):
        TrainBundle.from_bytes(bytes(damaged))


def test_truncation_and_garbage_detected():
    blob = fresh().to_bytes()
    for bad in (blob[:-1], blob + b"\0", b"", b"PHTB\x01junk"):
        with pytest.raises(TamperError):
            TrainBundle.from_bytes(bad)


# --------------------------------------------------------------------------- registry


def test_push_pull_byte_identical():
    reg = TrainRegistry()
    b = fresh()
    push(reg, b)
    assert reg.pull_bytes(b.train_id) == b.to_bytes()
    assert pull(reg, b.train_id) == b


def test_unknown_train_not_found():
    with pytest.raises(NotFoundError):
        TrainRegistry().pull("nope")
    with pytest.raises(NotFoundError):
        TrainRegistry().history("nope")


def test_history_lists_versions():
    reg = TrainRegistry()
    b0 = fresh()
    b1 = step(b0)
    reg.push(b0)
    reg.push(b1)
    assert reg.pull(b0.train_id) == b1
    hist = reg.history(b0.train_id)
    assert [h["registry_version"] for h in hist] == [1, 2]
    assert [h["cursor"] for h in hist] == [0, 1]
    assert reg.pull(b0.train_id, 1) == b0
    with pytest.raises(NotFoundError):
        reg.pull(b0.train_id, 3)


def test_stale_push_rejected():
    reg = TrainRegistry()
    b0 = fresh()
    b1 = step(b0)
    reg.push(b1)
    with pytest.raises(PHTError, match="out-of-order"):
        reg.push(b0)
    with pytest.raises(PHTError):
        reg.push(b1)


def test_provenance_rewrite_rejected():
    reg = TrainRegistry()
    b0 = fresh(("A", "B"))
    reg.push(step(b0, "A", 1.0))
    other = commit(b0, b0.parameters, visit_record("A", epochs=9, final_loss=0.1, wall_time=0.0))
    other = step(other, "B")  # version 3 but provenance diverges at entry 0
    with pytest.raises(PHTError, match="provenance"):
        reg.push(other)


def test_registry_rejects_corrupt_bytes():
    blob = bytearray(fresh().to_bytes())
    blob[-1] ^= 1
    with pytest.raises(TamperError):
        TrainRegistry().push(bytes(blob))
