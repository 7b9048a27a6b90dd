import csv
import json
from pathlib import Path

import pytest
import yaml

from phtrain import cli
from phtrain.config import ConfigError, default_config_text, load_config, load_default, parse_config
from phtrain.orchestrator import Policy
from phtrain.preprocess import CLASS_CODES

TINY = """
name: tiny
seed: 3
dataset:
  synthetic: {n: 96, image_size: 4, noise: 10.0, proportions: [0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125]}
training: {epochs: 2, learning_rate: 0.01, batch_size: 8}
augment: {target_size: 4}
plans:
  - {policy: IIL}
  - {policy: Centralized}
  - {policy: FL, rounds: 2, local_epochs: 1}
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# --------------------------------------------------------------------------- config


def test_default_config_parses_and_is_exhaustive():
    cfg = load_default()
    assert cfg.dataset["synthetic"]["n"] == 2000
    assert cfg.partition.station_count == 3
    assert [p["policy"] for p in cfg.plans] == ["IIL", "Centralized", "FL"]
    raw = yaml.safe_load(default_config_text())
    assert set(raw["training"]) == set(cfg.training.to_dict()) - {"seed"}
    assert set(raw["augment"]) == set(cfg.augment.to_dict())


def test_seed_override_reaches_every_section():
    cfg = parse_config(TINY, seed=9)
    assert cfg.seed == cfg.training.seed == cfg.partition.seed == 9
    assert all(p.seed == 9 for p in cfg.experiment_plans(["a"]))


def test_digest_tracks_content_not_output():
    a = parse_config(TINY)
    assert a.digest == parse_config(TINY, output="elsewhere").digest
    assert a.digest != parse_config(TINY, seed=4).digest


@pytest.mark.parametrize(
    "patch, path, line",
    [
        ("partition: {test_fraction: 1.0}\n", "partition.test_fraction", 12),
        ("bogus: 1\n", "bogus", 12),
        ("model: {hidden_units: -2}\n", "model.hidden_units", 12),
    ],
)
def test_field_diagnostics(patch, path, line):
    with pytest.raises(ConfigError) as info:
        parse_config(TINY + patch, "x.yaml")
    assert info.value.path == path and info.value.line == line
    assert str(info.value).startswith(f"x.yaml:{line}: {path}")


def test_plan_diagnostics():
    bad = TINY.replace("{policy: FL, rounds: 2, local_epochs: 1}", "{policy: FL, rounds: 0}")
    with pytest.raises(ConfigError, match=r"plans\[2\]"):
        parse_config(bad)
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(TINY + "  - {policy: IIL}\n")
    with pytest.raises(ConfigError, match="must be one of"):
        parse_config(TINY.replace("policy: IIL", "policy: Gossip"))


def test_dataset_source_rules(tmp_path):
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config(TINY.replace("  synthetic:", "  directory: {path: x}\n  synthetic:"))
    text = TINY.replace("  synthetic: {n: 96, image_size: 4, noise: 10.0, proportions: [0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125]}", "  directory: {path: imgs}")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(write(tmp_path, text))


def test_training_seed_forbidden():
    with pytest.raises(ConfigError, match="top-level seed"):
        parse_config(TINY.replace("batch_size: 8", "batch_size: 8, seed: 2"))


def test_invalid_yaml_has_line():
    with pytest.raises(ConfigError) as info:
        parse_config("a: [1, 2\nb: 3\n")
    assert info.value.line is not None


# --------------------------------------------------------------------------- run


def test_run_writes_all_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(write(tmp_path, TINY)), "--output", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(
        [
            "partition.json",
            "distribution.json",
            "events.jsonl",
            "comparison.csv",
            *[f"{p}_{kind}" for p in ("iil", "centralized", "fl") for kind in ("trace.csv", "summary.json")],
        ]
    )
    digest = parse_config(TINY).digest
    for path in out.iterdir():
        assert digest in path.read_text()
    trace = (out / "iil_trace.csv").read_text().splitlines()
    assert trace[1] == "epoch,loss,mean_accuracy,mean_recall,marker"
    assert len(trace) == 2 + 6
    assert "IIL" in capsys.readouterr().out


def test_run_is_byte_deterministic(tmp_path):
    cfg = write(tmp_path, TINY)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(cfg), "--output", str(a)]) == 0
    assert cli.main(["run", str(cfg), "--output", str(b)]) == 0
    for path in sorted(a.iterdir()):
        assert path.read_bytes() == (b / path.name).read_bytes(), path.name


def test_seed_flag_changes_results(tmp_path):
    cfg = write(tmp_path, TINY)
    cli.main(["run", str(cfg), "--output", str(tmp_path / "a")])
    cli.main(["run", str(cfg), "--output", str(tmp_path / "b"), "--seed", "11"])
    assert (tmp_path / "a/partition.json").read_text() != (tmp_path / "b/partition.json").read_text()
    assert json.loads((tmp_path / "b/iil_summary.json").read_text())["seed"] == 11


def test_run_config_error_exit_two(tmp_path, capsys):
    cfg = write(tmp_path, TINY + "partition: {test_fraction: 1.0}\n")
    assert cli.main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "partition.test_fraction" in err and ":12:" in err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_run_runtime_failure_exit_one(tmp_path, monkeypatch):
    from phtrain import harness

    original = harness.build_experiment

    def sabotaged(cfg, dataset=None):
        exp = original(cfg, dataset)
        st = exp.stations["station-1"]
        st.store.objects.delete(st.store.resources.all("Media")[0].content_url)
        return exp

    monkeypatch.setattr(harness, "build_experiment", sabotaged)
    out = tmp_path / "o"
    assert cli.main(["run", str(write(tmp_path, TINY)), "--output", str(out)]) == 1
    summary = json.loads((out / "iil_summary.json").read_text())
    assert summary["aborted"] and "station-1" in summary["error"]
    assert (out / "events.jsonl").exists() and (out / "partition.json").exists()


def test_directory_dataset(tmp_path):
    from phtrain.preprocess import synth_dataset, write_image_tree

    write_image_tree(synth_dataset(48, [0.125] * 8, image_size=6, seed=1), tmp_path / "imgs")
    text = TINY.replace(
        "  synthetic: {n: 96, image_size: 4, noise: 10.0, proportions: [0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125]}",
        "  directory: {path: imgs}",
    )
    cfg = write(tmp_path, text)
    assert cli.main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o/partition.json").read_text())
    assert len(manifest["test"]) == 9


# --------------------------------------------------------------------------- partition


def labels_csv(tmp_path, labels):
    path = tmp_path / "labels.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "label"])
        for i, lab in enumerate(labels):
            w.writerow([f"img_{i:05d}.png", CLASS_CODES[lab]])
    return path


def test_partition_full_scale(tmp_path):
    from phtrain.preprocess import ISIC_PROPORTIONS, class_index, largest_remainder

    props = [0.0] * 8
    for code, p in ISIC_PROPORTIONS.items():
        props[class_index(code)] = p
    labels = [c for c, k in enumerate(largest_remainder(25331, props)) for _ in range(k)]
    out = tmp_path / "m.json"
    assert cli.main(["partition", "--labels", str(labels_csv(tmp_path, labels)), "--stations", "3", "--test-frac", "0.2", "--seed", "0", "--output", str(out)]) == 0
    m = json.loads(out.read_text())
    assert len(m["test"]) == 5066
    assert [len(s["train"]) + len(s["validation"]) for s in m["stations"]] == [6755] * 3


def test_partition_single_class_to_directory(tmp_path):
    assert cli.main(["partition", "--labels", str(labels_csv(tmp_path, [0] * 30)), "--output", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "partition.json").read_text())
    assert (len(m["test"]), *[len(s["train"]) + len(s["validation"]) for s in m["stations"]]) == (6, 8, 8, 8)


def test_partition_to_stdout(tmp_path, capsys):
    assert cli.main(["partition", "--labels", str(labels_csv(tmp_path, [0] * 30))]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 0


def test_partition_errors(tmp_path):
    assert cli.main(["partition", "--labels", str(tmp_path / "nope.csv")]) == 2
    assert cli.main(["partition", "--labels", str(labels_csv(tmp_path, [0] * 30)), "--test-frac", "1.0"]) == 2
    assert cli.main(["partition", "--labels", str(labels_csv(tmp_path, [0] * 30 + [1])), "--stations", "3"]) == 1


# --------------------------------------------------------------------------- compare


def summary(tmp_path, name, acc, recall, classes=8):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps({"policy": name, "seed": 0, "num_classes": classes, "config_sha256": "d", "final_test": {"mean_accuracy": acc, "mean_recall": recall}}))
    return str(path)


def test_compare_two_rows(tmp_path, capsys):
    paths = [summary(tmp_path, "Centralized", 0.754, 0.6922), summary(tmp_path, "IIL", 0.7183, 0.6335)]
    assert cli.main(["compare", *paths, "--output", str(tmp_path / "t.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert "Mean Accuracy" in lines[0] and "Mean Recall" in lines[0]
    assert lines[2].startswith("Centralized") and "75.40" in lines[2] and "69.22" in lines[2]
    assert (tmp_path / "t.csv").read_text().startswith("# config_sha256=d\n")


def test_compare_sorts_three_policies(tmp_path, capsys):
    paths = [summary(tmp_path, "FL", 0.5, 0.4), summary(tmp_path, "IIL", 0.7, 0.6), summary(tmp_path, "Centralized", 0.6, 0.5)]
    assert cli.main(["compare", *paths]) == 0
    rows = capsys.readouterr().out.splitlines()[2:]
    assert [r.split()[0] for r in rows] == ["IIL", "Centralized", "FL"]


def test_compare_errors(tmp_path):
    assert cli.main(["compare", summary(tmp_path, "IIL", 0.7, 0.6)]) == 2
    assert cli.main(["compare", summary(tmp_path, "IIL", 0.7, 0.6), summary(tmp_path, "FL", 0.7, 0.6, classes=2)]) == 1
    assert cli.main(["compare", summary(tmp_path, "IIL", 0.7, 0.6), str(tmp_path / "missing.json")]) == 2


def test_config_command_prints_default(capsys):
    assert cli.main(["config"]) == 0
    assert capsys.readouterr().out == default_config_text()


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "phtrain", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "phtrain" in res.stdout
