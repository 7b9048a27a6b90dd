import numpy as np
import pytest

from phtrain.bundle import ModelSpec, TaskSpec
from phtrain.learner import TrainingConfig
from phtrain.partition import PartitionSpec, split
from phtrain.preprocess import AugmentConfig, synth_dataset
from phtrain.station import PreparedData, Station


def tiny_task(epochs=2, size=4, hidden=0, lr=1e-2, **training):
    return TaskSpec(
        TrainingConfig(epochs=epochs, learning_rate=lr, batch_size=8, **training),
        AugmentConfig(target_size=size),
        ModelSpec(size * size * 3, 8, hidden),
    )


def tiny_world(n=96, stations=3, size=4, seed=0):
    """Synthetic images, a stratified split and one ingested Station per shard."""
    samples = synth_dataset(n, [1 / 8] * 8, image_size=size, seed=seed)
    ids = [f"p{i:03d}" for i in range(n)]
    images = {i: im for i, (im, _) in zip(ids, samples)}
    labels = {i: lab for i, (_, lab) in zip(ids, samples)}
    test_ids, shards = split(labels, PartitionSpec(station_count=stations, seed=seed))
    out = {}
    for shard in shards:
        st = Station(shard.station_id, clock=lambda: 0.0)
        st.ingest(shard, images, labels)
        out[shard.station_id] = st
    test = PreparedData.from_samples([(images[i], labels[i]) for i in test_ids], size)
    return out, test, images, labels, shards


@pytest.fixture
def world():
    return tiny_world()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria report one line each; printed after the test summary
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
