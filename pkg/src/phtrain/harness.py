"""End-to-end experiment pipeline: data -> partition -> stations -> plans -> reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import metrics, partition, preprocess
from .bundle import TaskSpec, TrainRegistry
from .config import ExperimentConfig
from .errors import ConfigurationError, DataError, PHTError
from .messages import WireLog
from .orchestrator import Policy, RunRecord, logical_clock, run_plan
from .station import PreparedData, Station, StationConfig

log = logging.getLogger(__name__)

TRACE_HEADER = ("epoch", "loss", "mean_accuracy", "mean_recall", "marker")


@dataclass
class Dataset:
    ids: list[str]
    images: dict[str, preprocess.RawImage]
    labels: dict[str, int]

    @property
    def num_classes(self) -> int:
        return len(preprocess.CLASS_CODES)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if "synthetic" in cfg.dataset:
        syn = cfg.dataset["synthetic"]
        samples = preprocess.synth_dataset(
            syn["n"],
            syn.get("proportions"),
            image_size=syn.get("image_size", 16),
            seed=cfg.seed,
            noise=syn.get("noise", 60.0),
            color_spread=syn.get("color_spread", 4.0),
        )
        width = len(str(len(samples)))
        ids = [f"s{i:0{width}d}" for i in range(len(samples))]
        return Dataset(ids, {i: im for i, (im, _) in zip(ids, samples)}, {i: lab for i, (_, lab) in zip(ids, samples)})
    d = cfg.dataset["directory"]
    root = Path(d["path"])
    rows = preprocess.read_labels_csv(root / d.get("labels", "labels.csv"))
    images, labels, ids = {}, {}, []
    for filename, label in rows:
        sid = Path(filename).stem
        if sid in labels:
            raise DataError(f"duplicate sample id {sid!r} in labels file")
        path = root / filename
        if not path.exists():
            raise DataError(f"image {path} listed in labels file does not exist")
        images[sid] = preprocess.decode_png(path.read_bytes())
        labels[sid] = label
        ids.append(sid)
    return Dataset(ids, images, labels)


@dataclass
class Experiment:
    """A fully provisioned experiment: partition, ingested stations, held-out test set."""

    config: ExperimentConfig
    dataset: Dataset
    test_ids: list
    shards: list[partition.DatasetShard]
    stations: dict[str, Station]
    test: PreparedData
    task: TaskSpec
    registry: TrainRegistry = field(default_factory=TrainRegistry)
    wire_log: WireLog = field(default_factory=WireLog)

    def run_id(self, plan) -> str:
        return f"{self.config.name}-{plan.policy.value.lower()}-{self.config.seed}"

    def run(self, plan) -> RunRecord:
        """Execute one plan; failures come back as an aborted (partial) record."""
        try:
            return run_plan(
                plan,
                self.task,
                self.stations,
                self.registry,
                test=self.test,
                run_id=self.run_id(plan),
                clock=logical_clock(),
                **({} if plan.policy is Policy.CENTRALIZED else {"wire_log": self.wire_log}),
            )
        except (PHTError, FloatingPointError) as exc:
            return RunRecord(plan.policy, plan.seed, self.run_id(plan), aborted=True, error=f"{type(exc).__name__}: {exc}")

    def plans(self):
        return self.config.experiment_plans([s.station_id for s in self.shards])


def build_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None) -> Experiment:
    dataset = dataset or load_dataset(cfg)
    test_ids, shards = partition.split(dataset.labels, cfg.partition)
    stations = {}
    for shard in shards:
        st = Station(StationConfig(shard.station_id), clock=logical_clock())
        st.ingest(shard, dataset.images, dataset.labels, experiment=cfg.name)
        stations[shard.station_id] = st
    target = cfg.augment.target_size
    test = PreparedData.from_samples([(dataset.images[i], dataset.labels[i]) for i in test_ids], target)
    task = TaskSpec(cfg.training, cfg.augment, cfg.model_spec(target * target * 3, dataset.num_classes))
    return Experiment(cfg, dataset, test_ids, shards, stations, test, task)


# --------------------------------------------------------------------------- reports


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def trace_csv(record: RunRecord, config_digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_sha256={config_digest} policy={record.policy.value} seed={record.seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for row in metrics.loss_trace_report(record):
        writer.writerow([row.epoch, _fmt(row.loss), _fmt(row.mean_accuracy), _fmt(row.mean_recall), row.marker])
    return buf.getvalue()


def summary_dict(record: RunRecord, config_digest: str, num_classes: int) -> dict:
    out = record.summary()
    out["config_sha256"] = config_digest
    out["num_classes"] = num_classes
    # reports use the per-class (one-vs-rest) reading of mean accuracy
    out["mean_accuracy_definition"] = "per_class"
    return out


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def compare_table(summaries: list[dict]) -> list[dict]:
    """Rows of (policy, mean accuracy, mean recall) sorted by accuracy, descending."""
    if len(summaries) < 2:
        raise ConfigurationError("compare needs at least two run summaries")
    classes = {s.get("num_classes") for s in summaries}
    if len(classes) != 1:
        raise DataError(f"summaries disagree on the number of classes: {sorted(map(str, classes))}")
    rows = []
    for s in summaries:
        ft = s.get("final_test") or {}
        if "mean_accuracy" not in ft or "mean_recall" not in ft:
            raise DataError(f"summary for {s.get('policy')} has no final test metrics")
        rows.append({"policy": s["policy"], "seed": s.get("seed"), "mean_accuracy": ft["mean_accuracy"], "mean_recall": ft["mean_recall"]})
    rows.sort(key=lambda r: (-r["mean_accuracy"], r["policy"]))
    return rows


def format_compare(rows: list[dict]) -> str:
    width = max(len("Metrics"), *(len(r["policy"]) for r in rows))
    lines = [f"{'Metrics':<{width}} | Mean Accuracy | Mean Recall"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(f"{r['policy']:<{width}} | {100 * r['mean_accuracy']:13.2f} | {100 * r['mean_recall']:11.2f}")
    return "\n".join(lines) + "\n"


def compare_csv(rows: list[dict], config_digest: str | None = None) -> str:
    buf = io.StringIO()
    if config_digest:
        buf.write(f"# config_sha256={config_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["policy", "mean_accuracy", "mean_recall"])
    for r in rows:
        writer.writerow([r["policy"], _fmt(r["mean_accuracy"]), _fmt(r["mean_recall"])])
    return buf.getvalue()


def events_jsonl(records: list[RunRecord], config_digest: str) -> str:
    lines = []
    for rec in records:
        for ev in rec.events:
            lines.append(json.dumps({"config_sha256": config_digest, "run_id": rec.run_id, **ev}, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class RunOutput:
    records: list[RunRecord]
    files: list[Path]
    failed: bool = False


def run_experiment(cfg: ExperimentConfig, output_dir) -> RunOutput:
    """Execute every plan in the config and write all artifacts to ``output_dir``.

    Artifacts are written even when a plan aborts (partial record).
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest
    files: list[Path] = []

    def write(name: str, text: str) -> None:
        path = out / name
        path.write_text(text)
        files.append(path)

    exp = build_experiment(cfg)
    write("partition.json", partition.manifest_json(exp.test_ids, exp.shards, cfg.partition, config_sha256=digest))
    write(
        "distribution.json",
        dumps({"config_sha256": digest, "rows": {k: {preprocess.CLASS_CODES[c]: v for c, v in row.items()} for k, row in partition.distribution_report(exp.shards, exp.test_ids, exp.dataset.labels).items()}}),
    )

    records, summaries = [], []
    failed = False
    for plan in exp.plans():
        log.info("running %s (seed %d)", plan.policy.value, cfg.seed)
        rec = exp.run(plan)
        records.append(rec)
        tag = plan.policy.value.lower()
        write(f"{tag}_trace.csv", trace_csv(rec, digest))
        summary = summary_dict(rec, digest, exp.dataset.num_classes)
        summaries.append(summary)
        write(f"{tag}_summary.json", dumps(summary))
        if rec.aborted:
            log.error("%s aborted: %s", plan.policy.value, rec.error)
            failed = True
    write("events.jsonl", events_jsonl(records, digest))
    complete = [s for s in summaries if s.get("final_test")]
    if len(complete) >= 2:
        write("comparison.csv", compare_csv(compare_table(complete), digest))
    return RunOutput(records, files, failed)


def final_test_metrics(record: RunRecord) -> dict:
    if record.final_test is None:
        raise DataError("run has no final test metrics")
    return record.final_test


def hop_losses(record: RunRecord) -> list[tuple[float, float]]:
    """(last loss before, first loss after) for every hop boundary."""
    rows = metrics.loss_trace_report(record)
    return [(rows[i].loss, rows[i + 1].loss) for i, r in enumerate(rows) if r.marker.startswith("hop:")]


__all__ = [
    "Dataset",
    "Experiment",
    "build_experiment",
    "load_dataset",
    "run_experiment",
    "trace_csv",
    "summary_dict",
    "compare_table",
    "format_compare",
    "hop_losses",
]
