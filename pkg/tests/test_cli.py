from __future__ import annotations

import json
from pathlib import Path

import pytest

from logaudit.cli import main
from logaudit.synthetic import generate_demo


@pytest.fixture(scope="module")
def demo(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("demo")
    generate_demo(root)
    return root


@pytest.fixture(scope="module")
def completed_run(demo: Path) -> Path:
    config = str(demo / "config.json")
    assert main(["ingest", "--config", config]) == 0
    assert main(["forge", "--config", config]) == 0
    assert main(["detect", "--config", config]) == 0
    assert main(["evaluate", "--config", config]) == 0
    return demo


def test_full_phase_sequence(completed_run: Path):
    out = completed_run / "out"
    assert (out / "store.json").exists()
    assert (out / "registry.json").exists()
    assert (out / "conclusions.json").exists()
    assert (out / "report.txt").exists()
    assert (out / "report.struct").exists()
    assert (out / "costs.struct").exists()


def test_detected_exactly_the_two_insiders(completed_run: Path):
    doc = json.loads((completed_run / "out" / "conclusions.json").read_text())
    verdicts = {u: item["verdict"] for u, item in doc["users"].items()}
    assert len(verdicts) == 50
    malicious = sorted(u for u, v in verdicts.items() if v == "malicious")
    assert malicious == ["KEYL0001", "LEAK0001"]
    for user in malicious:
        assert doc["users"][user]["anomalies"]
        assert doc["users"][user]["consensus"] is True


def test_perfect_metrics_in_struct_report(completed_run: Path):
    doc = json.loads((completed_run / "out" / "report.struct").read_text())
    row = doc["metrics"][0]
    assert row["prec"] == 1.0
    assert row["dr"] == 1.0
    assert row["fpr"] == 0.0
    assert row["acc"] == 1.0
    assert row["counts"] == {"tp": 2, "fp": 0, "fn": 0, "tn": 48}


def test_transcripts_written_per_user(completed_run: Path):
    transcripts = completed_run / "out" / "transcripts"
    assert len(list(transcripts.glob("*.json"))) == 50
    keylog = json.loads((transcripts / "KEYL0001.json").read_text())
    assert keylog["final"]["verdict"] == "malicious"
    assert keylog["rounds"][0]["a"]["verdict"] == "malicious"
    assert keylog["rounds"][0]["consensus"] is True


def test_manifests_record_config_hash(completed_run: Path):
    out = completed_run / "out"
    manifests = {p.name: json.loads(p.read_text()) for p in out.glob("manifest-*.json")}
    assert set(manifests) == {
        "manifest-ingest.json", "manifest-forge.json",
        "manifest-detect.json", "manifest-evaluate.json",
    }
    hashes = {m["config_hash"] for m in manifests.values()}
    assert len(hashes) == 1
    assert manifests["manifest-forge.json"]["tools"] == 7
    assert manifests["manifest-forge.json"]["unservable"] == []
    assert manifests["manifest-detect.json"]["seeds"]["executor_a"] == 1


def test_costs_ledgers_written(completed_run: Path):
    out = completed_run / "out"
    detect_lines = (out / "costs-detect.jsonl").read_text().splitlines()
    assert detect_lines
    record = json.loads(detect_lines[0])
    assert {"backend_name", "prompt_tokens", "completion_tokens",
            "dollars", "latency_ms", "stage"} <= set(record)
    assert main(["cost-report", "--config", str(completed_run / "config.json")]) == 0


def test_forge_is_idempotent(completed_run: Path):
    registry_path = completed_run / "out" / "registry.json"
    before = registry_path.read_bytes()
    assert main(["forge", "--config", str(completed_run / "config.json")]) == 0
    assert registry_path.read_bytes() == before


def test_detect_without_registry(demo: Path, tmp_path, capsys):
    # A fresh output tree that has a store but no registry.
    config_doc = json.loads((demo / "config.json").read_text())
    config_doc["store_path"] = str(demo / "out" / "store.json")
    config_doc["registry_path"] = str(tmp_path / "missing-registry.json")
    config_doc["output_dir"] = str(tmp_path / "out")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc))
    code = main(["detect", "--config", str(config_path)])
    assert code == 1
    assert capsys.readouterr().err.startswith("RegistryMissing:")


def test_evaluate_without_labels(demo: Path, tmp_path, capsys):
    config_doc = json.loads((demo / "config.json").read_text())
    del config_doc["dataset"]["labels"]
    config_doc["store_path"] = str(tmp_path / "store.json")
    config_doc["output_dir"] = str(tmp_path / "out")
    config_doc["dataset"]["paths"] = {
        kind: str(demo / "data" / f"{kind}.csv")
        for kind in ("logon", "device", "http", "email", "file")
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc))
    assert main(["ingest", "--config", str(config_path)]) == 0
    code = main(["evaluate", "--config", str(config_path)])
    assert code == 1
    assert capsys.readouterr().err.startswith("LabelsMissing:")


def test_missing_ground_truth_file_is_labels_missing(demo: Path, tmp_path, capsys):
    config_doc = json.loads((demo / "config.json").read_text())
    config_doc["dataset"]["labels"] = "data/does-not-exist.csv"
    config_doc["dataset"]["paths"] = {
        kind: str(demo / "data" / f"{kind}.csv")
        for kind in ("logon", "device", "http", "email", "file")
    }
    config_doc["store_path"] = str(tmp_path / "store.json")
    config_doc["output_dir"] = str(tmp_path / "out")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc))
    code = main(["ingest", "--config", str(config_path)])
    assert code == 1
    assert capsys.readouterr().err.startswith("LabelsMissing:")


def test_unknown_config_key_rejected(tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"dataset": {"kind": "cert"},
                                       "backend": {"type": "scripted", "script": "s.json"},
                                       "typo_key": 1}))
    code = main(["ingest", "--config", str(config_path)])
    assert code == 1
    assert capsys.readouterr().err.startswith("ConfigInvalid:")


def test_variant_flag_overrides_config(demo: Path, completed_run: Path, tmp_path):
    config_doc = json.loads((demo / "config.json").read_text())
    config_doc["store_path"] = str(completed_run / "out" / "store.json")
    config_doc["registry_path"] = str(completed_run / "out" / "registry.json")
    config_doc["backend"]["script"] = str(demo / "script.json")
    config_doc["output_dir"] = str(tmp_path / "out")
    for name, item in config_doc["lists"].items():
        item["path"] = str(demo / "lists" / f"{name}.txt")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc))
    assert main(["detect", "--config", str(config_path), "--variant", "no_emad"]) == 0
    doc = json.loads((tmp_path / "out" / "conclusions.json").read_text())
    assert doc["variant"] == "no_emad"
    verdicts = {u: i["verdict"] for u, i in doc["users"].items()}
    assert sorted(u for u, v in verdicts.items() if v == "malicious") == \
        ["KEYL0001", "LEAK0001"]


def test_coverage_gate_and_override(demo: Path, completed_run: Path, tmp_path, capsys):
    # A decomposition that never mentions FileOp leaves it uncovered.
    partial_script = [
        {"when": "[stage: decompose]",
         "response": "1. Check logons. (types: Logon, Logoff)\n"
                     "2. Check websites. (types: HttpVisit)\n"
                     "3. Check devices. (types: DeviceConnect, DeviceDisconnect)\n"
                     "4. Check email. (types: EmailSend)"},
        {"when": "[stage: refine]", "response": "nothing further"},
        {"when": "[stage: tool-draft]",
         "response": "select activity=Logon user={user} day={day}\naggregate func=count",
         "repeat": True},
    ]
    script_path = tmp_path / "partial-script.json"
    script_path.write_text(json.dumps(partial_script))
    config_doc = json.loads((demo / "config.json").read_text())
    config_doc["backend"]["script"] = str(script_path)
    config_doc["store_path"] = str(completed_run / "out" / "store.json")
    config_doc["registry_path"] = str(tmp_path / "registry.json")
    config_doc["output_dir"] = str(tmp_path / "out")
    config_doc["tool_tests"] = {}
    for name, item in config_doc["lists"].items():
        item["path"] = str(demo / "lists" / f"{name}.txt")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc))

    code = main(["forge", "--config", str(config_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("CoverageIncomplete:")
    assert "FileOp" in err

    script_path.write_text(json.dumps(partial_script))  # fresh script
    assert main(["forge", "--config", str(config_path),
                 "--allow-partial-coverage"]) == 0
    registry = json.loads((tmp_path / "registry.json").read_text())
    assert len(registry["subtasks"]["items"]) == 4


def test_ingest_applies_undersample_cap(demo: Path, tmp_path):
    config_doc = json.loads((demo / "config.json").read_text())
    config_doc["dataset"]["paths"] = {
        kind: str(demo / "data" / f"{kind}.csv")
        for kind in ("logon", "device", "http", "email", "file")
    }
    config_doc["dataset"]["labels"] = str(demo / "data" / "labels.csv")
    config_doc["undersample_cap"] = 1000
    config_doc["store_path"] = str(tmp_path / "store.json")
    config_doc["output_dir"] = str(tmp_path / "out")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc))
    assert main(["ingest", "--config", str(config_path)]) == 0

    from logaudit.logstore import load_store

    store = load_store(tmp_path / "store.json")
    malicious = store.malicious_ids()
    assert len(malicious) == 8  # every labeled entry survives
    assert len(store.entries) == 1000 + len(malicious)


def test_yaml_config_accepted(demo: Path, tmp_path):
    import yaml

    config_doc = json.loads((demo / "config.json").read_text())
    config_doc["dataset"]["paths"] = {
        kind: str(demo / "data" / f"{kind}.csv")
        for kind in ("logon", "device", "http", "email", "file")
    }
    config_doc["dataset"]["labels"] = str(demo / "data" / "labels.csv")
    config_doc["store_path"] = str(tmp_path / "store.json")
    config_doc["output_dir"] = str(tmp_path / "out")
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(config_doc))
    assert main(["ingest", "--config", str(config_path)]) == 0
