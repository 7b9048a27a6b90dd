"""The data provider side: FHIR-lite resource store, blob object store, and the
station runtime that executes a visiting Train against local data."""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import preprocess
from .bundle import TaskSpec, TrainBundle, commit, record_failure, visit_record
from .errors import ConfigurationError, DataError, NotFoundError, ResolutionError, RouteError, TamperError
from .learner import AdamState, LocalResult, ModelParameters, TrainingConfig, epoch_generator, train_local
from .partition import DatasetShard
from .preprocess import CLASS_CODES, AugmentConfig, RawImage

SEXES = ("male", "female", "other")
COHORTS = ("train", "validation")


# --------------------------------------------------------------------------- resources


@dataclass(frozen=True)
class PatientResource:
    id: str
    age: int | None = None
    sex: str | None = None
    anatomical_site: str | None = None
    media_refs: tuple[str, ...] = ()
    # which local split the sample belongs to; not part of FHIR Patient
    cohort: str = "train"

    def __post_init__(self):
        if self.age is not None and (not isinstance(self.age, int) or self.age < 0):
            raise DataError(f"Patient/{self.id}: age must be a non-negative integer")
        if self.sex is not None and self.sex not in SEXES:
            raise DataError(f"Patient/{self.id}: sex must be one of {SEXES}")
        if self.cohort not in COHORTS:
            raise DataError(f"Patient/{self.id}: cohort must be one of {COHORTS}")
        object.__setattr__(self, "media_refs", tuple(self.media_refs))

    def to_json(self) -> dict:
        d = asdict(self)
        d["media_refs"] = list(self.media_refs)
        return {"resourceType": "Patient", **d}


@dataclass(frozen=True)
class MediaResource:
    id: str
    content_url: str
    label: str

    def __post_init__(self):
        if not self.content_url:
            raise DataError(f"Media/{self.id}: content_url must not be empty")
        if self.label not in CLASS_CODES:
            raise DataError(f"Media/{self.id}: label {self.label!r} not in {CLASS_CODES}")

    def to_json(self) -> dict:
        return {"resourceType": "Media", **asdict(self)}


@dataclass(frozen=True)
class ImageStudyResource:
    id: str
    name: str
    patient_refs: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "patient_refs", tuple(self.patient_refs))

    def to_json(self) -> dict:
        return {"resourceType": "ImageStudy", "id": self.id, "name": self.name, "patient_refs": list(self.patient_refs)}


RESOURCE_TYPES = {"Patient": PatientResource, "Media": MediaResource, "ImageStudy": ImageStudyResource}
# FHIR proper spells it ImagingStudy; accept that on ingest.
RESOURCE_ALIASES = {"ImagingStudy": "ImageStudy"}


def resource_from_json(doc: dict):
    kind = RESOURCE_ALIASES.get(doc.get("resourceType"), doc.get("resourceType"))
    cls = RESOURCE_TYPES.get(kind)
    if cls is None:
        raise DataError(f"unsupported resourceType {doc.get('resourceType')!r}")
    fields = {k: v for k, v in doc.items() if k != "resourceType"}
    for key in ("media_refs", "patient_refs"):
        if key in fields:
            fields[key] = tuple(fields[key])
    return cls(**fields)


class ObjectStore:
    """Blob store keyed by location string."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: str, blob: bytes) -> str:
        if not key:
            raise DataError("object key must not be empty")
        with self._lock:
            self._blobs[key] = bytes(blob)
        return key

    def get(self, key: str) -> bytes:
        try:
            return self._blobs[key]
        except KeyError:
            raise NotFoundError(f"no object at {key!r}") from None

    def delete(self, key: str) -> None:
        with self._lock:
            self._blobs.pop(key, None)

    def __contains__(self, key):
        return key in self._blobs

    def __len__(self):
        return len(self._blobs)

    def keys(self) -> list[str]:
        return sorted(self._blobs)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for k in self.keys():
            h.update(k.encode() + b"\0" + hashlib.sha256(self._blobs[k]).digest())
        return h.hexdigest()


class ResourceStore:
    """Minimal FHIR-style store for Patient, Media and ImageStudy documents."""

    def __init__(self):
        self._resources: dict[str, dict[str, object]] = {k: {} for k in RESOURCE_TYPES}
        self._write_lock = threading.Lock()

    def create(self, resource) -> None:
        kind = type(resource).__name__.replace("Resource", "")
        table = self._resources[kind]
        if resource.id in table:
            raise DataError(f"duplicate {kind}/{resource.id}")
        table[resource.id] = resource

    def create_json(self, doc: dict):
        res = resource_from_json(doc)
        self.create(res)
        return res

    def read(self, kind: str, rid: str):
        kind = RESOURCE_ALIASES.get(kind, kind)
        if kind not in self._resources:
            raise NotFoundError(f"unknown resource type {kind!r}")
        try:
            return self._resources[kind][rid]
        except KeyError:
            raise NotFoundError(f"{kind}/{rid} not found") from None

    def search_patients(self, study_id: str) -> list[PatientResource]:
        study = self.read("ImageStudy", study_id)
        return [self.read("Patient", pid) for pid in sorted(study.patient_refs)]

    def census(self) -> dict[str, int]:
        return {k: len(v) for k, v in self._resources.items()}

    def all(self, kind: str) -> list:
        return [self._resources[kind][k] for k in sorted(self._resources[kind])]

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for kind in sorted(self._resources):
            for rid in sorted(self._resources[kind]):
                doc = self._resources[kind][rid].to_json()
                h.update(json.dumps(doc, sort_keys=True).encode())
        return h.hexdigest()


@dataclass
class StationStore:
    resources: ResourceStore = field(default_factory=ResourceStore)
    objects: ObjectStore = field(default_factory=ObjectStore)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def state_hash(self) -> str:
        return hashlib.sha256((self.resources.state_hash() + self.objects.state_hash()).encode()).hexdigest()

    def check_integrity(self) -> list[str]:
        """References that do not resolve (empty when the store is consistent)."""
        broken = []
        for study in self.resources.all("ImageStudy"):
            for pid in study.patient_refs:
                if pid not in self.resources._resources["Patient"]:
                    broken.append(f"ImageStudy/{study.id} -> Patient/{pid}")
        for patient in self.resources.all("Patient"):
            for mid in patient.media_refs:
                if mid not in self.resources._resources["Media"]:
                    broken.append(f"Patient/{patient.id} -> Media/{mid}")
        for media in self.resources.all("Media"):
            if media.content_url not in self.objects:
                broken.append(f"Media/{media.id} -> {media.content_url}")
        return broken


_ENDPOINT = re.compile(r"^[a-z][a-z0-9+.-]*://[^\s/]+(/\S*)?$")


@dataclass(frozen=True)
class StationConfig:
    station_id: str
    resource_endpoint: str = "mem://fhir"
    object_endpoint: str = "mem://objects"
    token: str = ""

    def __post_init__(self):
        if not self.station_id:
            raise ConfigurationError("station_id must not be empty")
        for name in ("resource_endpoint", "object_endpoint"):
            if not _ENDPOINT.match(getattr(self, name)):
                raise ConfigurationError(f"{name} {getattr(self, name)!r} is not a well-formed URL")


def content_url(station_id: str, sample_id) -> str:
    return f"station-{station_id}/{sample_id}.png"


def study_id_for(experiment: str) -> str:
    return f"study-{experiment}"


# --------------------------------------------------------------------------- ingest / resolve


def ingest(
    store: StationStore,
    shard: DatasetShard,
    images: dict,
    labels: dict,
    *,
    experiment: str = "isic2019",
    metadata: dict | None = None,
) -> ImageStudyResource:
    """Create one Patient + Media per sample and one ImageStudy for the shard.

    ``images``/``labels`` map sample id -> RawImage (or PNG bytes) / class index or code.
    ``metadata`` may map sample id -> dict(age=, sex=, anatomical_site=).
    """
    ids = list(shard.train) + list(shard.validation)
    if not ids:
        raise DataError(f"shard for {shard.station_id} is empty")
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate sample ids in shard {shard.station_id}")
    missing = [i for i in ids if i not in images or i not in labels]
    if missing:
        raise DataError(f"no image/label for sample ids {missing[:5]}")
    cohort = {i: "train" for i in shard.train} | {i: "validation" for i in shard.validation}
    station_key = shard.station_id.removeprefix("station-")
    with store.lock:
        pids = []
        for sid in ids:
            pid = str(sid)
            if pid in store.resources._resources["Patient"]:
                raise DataError(f"duplicate Patient/{pid}")
            image = images[sid]
            blob = image if isinstance(image, (bytes, bytearray)) else preprocess.encode_png(image)
            url = content_url(station_key, sid)
            code = CLASS_CODES[preprocess.class_index(labels[sid])]
            meta = (metadata or {}).get(sid, {})
            store.objects.put(url, blob)
            store.resources.create(MediaResource(id=f"media-{pid}", content_url=url, label=code))
            store.resources.create(PatientResource(id=pid, media_refs=(f"media-{pid}",), cohort=cohort[sid], **meta))
            pids.append(pid)
        study = ImageStudyResource(id=study_id_for(experiment), name=experiment, patient_refs=tuple(sorted(pids)))
        store.resources.create(study)
    return study


def resolve_dataset(store: StationStore, study_id: str, cohort: str | None = None) -> list[tuple[RawImage, int]]:
    """Query the study's Patients (ascending id), follow Media links and fetch blobs.

    Returns ``(image, class index)`` pairs; ``cohort`` restricts to train or validation.
    Read-only. Any dangling reference or missing/undecodable blob raises
    :class:`ResolutionError` naming the offending resource.
    """
    try:
        study = store.resources.read("ImageStudy", study_id)
    except NotFoundError as exc:
        raise ResolutionError(str(exc)) from None
    out = []
    for pid in sorted(study.patient_refs):
        try:
            patient = store.resources.read("Patient", pid)
        except NotFoundError:
            raise ResolutionError(f"ImageStudy/{study_id} references missing Patient/{pid}") from None
        if cohort is not None and patient.cohort != cohort:
            continue
        for mid in patient.media_refs:
            try:
                media = store.resources.read("Media", mid)
            except NotFoundError:
                raise ResolutionError(f"Patient/{pid} references missing Media/{mid}") from None
            try:
                blob = store.objects.get(media.content_url)
            except NotFoundError:
                raise ResolutionError(f"Media/{mid}: no blob at {media.content_url!r}") from None
            try:
                image = preprocess.decode_png(blob)
            except DataError as exc:
                raise ResolutionError(f"Media/{mid}: {exc}") from None
            out.append((image, preprocess.class_index(media.label)))
    return out


# --------------------------------------------------------------------------- local training


AUGMENT_STREAM = 1


@dataclass
class PreparedData:
    """Standardized (cropped + resized) uint8 pixels and labels."""

    pixels: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[tuple[RawImage, int]], target: int) -> "PreparedData":
        pixels = preprocess.stack_standardized([im for im, _ in samples], target)
        return cls(pixels, np.array([lab for _, lab in samples], dtype=np.int64))

    def features(self) -> np.ndarray:
        return preprocess.to_features(self.pixels)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def concat(cls, parts: Iterable["PreparedData"]) -> "PreparedData":
        parts = list(parts)
        return cls(np.concatenate([p.pixels for p in parts]), np.concatenate([p.labels for p in parts]))


def local_fit(
    params: ModelParameters,
    train: PreparedData,
    validation: PreparedData | None,
    training: TrainingConfig,
    augment: AugmentConfig,
    *,
    epoch_offset: int = 0,
    optimizer_state: AdamState | None = None,
) -> LocalResult:
    """train_local with per-epoch augmentation of the training pixels.

    Used identically by stations and by the centralized baseline so that the
    two produce bit-identical results on the same data and seed.
    """
    if len(train) == 0:
        raise ConfigurationError("training split is empty")

    def epoch_features(global_epoch: int) -> np.ndarray:
        rng = epoch_generator(training.seed, global_epoch, AUGMENT_STREAM)
        return preprocess.to_features(preprocess.augment_batch(train.pixels, augment, rng))

    val = None
    if validation is not None and len(validation):
        val = (validation.features(), validation.labels)
    return train_local(
        params,
        train.features(),
        train.labels,
        training,
        validation=val,
        epoch_features=epoch_features,
        epoch_offset=epoch_offset,
        optimizer_state=optimizer_state,
    )


class Station:
    """A data provider executing visiting Trains against its own store.

    ``clock`` supplies the time used for wall-time bookkeeping in provenance;
    inject a deterministic clock for reproducible bundles.
    """

    def __init__(self, config: StationConfig | str, store: StationStore | None = None, *, study_id: str | None = None, clock: Callable[[], float] = time.perf_counter):
        self.config = StationConfig(config) if isinstance(config, str) else config
        self.store = store if store is not None else StationStore()
        self.study_id = study_id or study_id_for("isic2019")
        self.clock = clock
        self._exec_lock = threading.Lock()
        self._cache: dict[tuple, tuple[PreparedData, PreparedData]] = {}

    @property
    def station_id(self) -> str:
        return self.config.station_id

    def ingest(self, shard: DatasetShard, images, labels, **kw) -> ImageStudyResource:
        study = ingest(self.store, shard, images, labels, **kw)
        self.study_id = study.id
        self._cache.clear()
        return study

    def load(self, target_size: int) -> tuple[PreparedData, PreparedData]:
        """Resolve and standardize the local train and validation cohorts."""
        key = (target_size, self.store.state_hash())
        if key not in self._cache:
            train = resolve_dataset(self.store, self.study_id, "train")
            val = resolve_dataset(self.store, self.study_id, "validation")
            self._cache = {key: (PreparedData.from_samples(train, target_size), PreparedData.from_samples(val, target_size))}
        return self._cache[key]

    def train_sample_count(self, target_size: int) -> int:
        return len(self.load(target_size)[0])

    def fit(self, params: ModelParameters, task: TaskSpec, *, epoch_offset: int = 0, optimizer_state=None) -> tuple[LocalResult, int]:
        train, val = self.load(task.augment.target_size)
        if len(train) == 0:
            raise ResolutionError(f"{self.station_id}: no training samples")
        result = local_fit(params, train, val, task.training, task.augment, epoch_offset=epoch_offset, optimizer_state=optimizer_state)
        return result, len(train)

    def execute_train(self, bundle: TrainBundle) -> TrainBundle:
        """Run the Train's task locally and commit the result.

        Resolution or training errors do not raise: the bundle comes back with
        unchanged parameters and cursor plus one entry in ``manifest.failures``.
        """
        bundle.verify()
        if bundle.next_station != self.station_id:
            raise RouteError(f"{self.station_id} is not next on the route of {bundle.train_id!r} (next: {bundle.next_station})")
        with self._exec_lock:
            m = bundle.manifest
            task = m.task
            epochs = task.training.epochs
            start = self.clock()
            carry = task.training.carry_optimizer_state
            try:
                result, n_train = self.fit(
                    bundle.parameters,
                    task,
                    epoch_offset=m.cursor * epochs,
                    optimizer_state=bundle.optimizer_state if carry else None,
                )
            except (DataError, ConfigurationError, FloatingPointError) as exc:
                return record_failure(
                    bundle,
                    {"station_id": self.station_id, "visit": m.cursor, "error": f"{type(exc).__name__}: {exc}"},
                )
            record = visit_record(
                self.station_id,
                epochs=epochs,
                final_loss=result.final_loss,
                wall_time=self.clock() - start,
                visit=m.cursor,
                cycle=m.current_cycle,
                train_samples=n_train,
                losses=result.losses,
                validation=result.validation,
            )
            return commit(bundle, result.params, record, result.optimizer_state if carry else None)
