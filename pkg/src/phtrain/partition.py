"""Stratified test / station / train-validation splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError


def _fraction(x) -> Fraction:
    # decimal-string conversion so 0.2 means exactly 1/5
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class PartitionSpec:
    test_fraction: float = 0.2
    station_count: int = 3
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigurationError("test_fraction must lie in (0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if not (isinstance(self.station_count, int) and self.station_count >= 1):
            raise ConfigurationError("station_count must be a positive integer")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            raise ConfigurationError("seed must be an unsigned integer")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class DatasetShard:
    station_id: str
    train: tuple = field(default_factory=tuple)
    validation: tuple = field(default_factory=tuple)

    @property
    def ids(self) -> tuple:
        return self.train + self.validation

    def __len__(self):
        return len(self.train) + len(self.validation)


def station_name(index: int) -> str:
    return f"station-{index}"


def _apportion(total: int, sizes: Sequence[int], fraction: Fraction) -> list[int]:
    """Split ``total`` across groups with quotas size*fraction, largest remainder."""
    quotas = [s * fraction for s in sizes]
    counts = [math.floor(q) for q in quotas]
    short = total - sum(counts)
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _normalize_labels(labels) -> dict:
    if isinstance(labels, Mapping):
        return dict(labels)
    labels = list(labels)
    if labels and isinstance(labels[0], tuple) and len(labels[0]) == 2:
        out = dict(labels)
        if len(out) != len(labels):
            raise DataError("duplicate sample ids")
        return out
    return dict(enumerate(labels))


def split(labels, spec: PartitionSpec = PartitionSpec()) -> tuple[list, list[DatasetShard]]:
    """Stratified split into a test id list and ``spec.station_count`` shards.

    ``labels`` is a mapping id -> label, a sequence of (id, label) pairs, or a
    plain label sequence (ids are then positions).

    Order of operations: test split first, then stations, then each station's
    train/validation split. Per class, the test share and the validation share
    use largest-remainder rounding; station leftovers are dealt round-robin by
    ascending station id with a pointer that carries over between classes.
    """
    by_id = _normalize_labels(labels)
    if not by_id:
        raise DataError("cannot partition an empty dataset")
    ids = sorted(by_id)
    classes = sorted({by_id[i] for i in ids})
    members = {c: [i for i in ids if by_id[i] == c] for c in classes}
    s_count = spec.station_count
    for c in classes:
        if len(members[c]) < s_count:
            raise DataError(f"class {c!r} has {len(members[c])} samples, fewer than {s_count} stations")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, 0x9A27])))
    shuffled = {}
    for c in classes:
        perm = rng.permutation(len(members[c]))
        shuffled[c] = [members[c][k] for k in perm]

    n = len(ids)
    test_frac = _fraction(spec.test_fraction)
    test_total = math.floor(n * test_frac)
    sizes = [len(members[c]) for c in classes]
    test_counts = _apportion(test_total, sizes, test_frac)

    test_ids: list = []
    per_station: list[dict] = [{c: [] for c in classes} for _ in range(s_count)]
    pointer = 0
    for c, t in zip(classes, test_counts):
        pool = shuffled[c]
        test_ids.extend(pool[:t])
        rest = pool[t:]
        base, extra = divmod(len(rest), s_count)
        take = [base] * s_count
        for k in range(extra):
            take[(pointer + k) % s_count] += 1
        pointer = (pointer + extra) % s_count
        pos = 0
        for s in range(s_count):
            per_station[s][c] = rest[pos : pos + take[s]]
            pos += take[s]

    val_frac = _fraction(spec.validation_fraction)
    shards = []
    for s in range(s_count):
        class_sizes = [len(per_station[s][c]) for c in classes]
        n_s = sum(class_sizes)
        if n_s == 0:
            raise DataError(f"{station_name(s)} received no samples")
        val_counts = _apportion(math.floor(n_s * val_frac), class_sizes, val_frac)
        train, val = [], []
        for c, v in zip(classes, val_counts):
            pool = per_station[s][c]
            val.extend(pool[:v])
            train.extend(pool[v:])
        shards.append(DatasetShard(station_name(s), tuple(sorted(train)), tuple(sorted(val))))
    return sorted(test_ids), shards


def distribution_report(shards: Sequence[DatasetShard], test_ids, labels) -> dict[str, dict[Hashable, float]]:
    """Per-split class proportions: ``test``, each station, and each station's train/validation."""
    by_id = _normalize_labels(labels)
    classes = sorted(set(by_id.values()))

    def row(id_list):
        id_list = list(id_list)
        if not id_list:
            raise DataError("empty split in distribution report")
        counts = {c: 0 for c in classes}
        for i in id_list:
            counts[by_id[i]] += 1
        return {c: counts[c] / len(id_list) for c in classes}

    report = {"test": row(test_ids)}
    for shard in shards:
        report[shard.station_id] = row(shard.ids)
        report[f"{shard.station_id}/train"] = row(shard.train)
        report[f"{shard.station_id}/validation"] = row(shard.validation)
    return report


def manifest(test_ids, shards: Sequence[DatasetShard], spec: PartitionSpec, **extra) -> dict:
    out = {
        "test": list(test_ids),
        "stations": [{"id": s.station_id, "train": list(s.train), "validation": list(s.validation)} for s in shards],
        "seed": spec.seed,
        "spec": spec.to_dict(),
    }
    out.update(extra)
    return out


def manifest_json(test_ids, shards, spec, **extra) -> str:
    return json.dumps(manifest(test_ids, shards, spec, **extra), indent=1, sort_keys=True) + "\n"


def load_manifest(data) -> tuple[list, list[DatasetShard], PartitionSpec]:
    if isinstance(data, (str, bytes)):
        data = json.loads(data)
    spec = PartitionSpec(**data["spec"])
    shards = [DatasetShard(s["id"], tuple(s["train"]), tuple(s["validation"])) for s in data["stations"]]
    return list(data["test"]), shards, spec
