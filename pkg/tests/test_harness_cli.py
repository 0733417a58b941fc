import json
import math

import numpy as np
import pytest

from ddpm_forensics import cli
from ddpm_forensics.harness import (NO_RESULTS, ExperimentConfig, Zoo, build_spec, emit_report, monotone_trend,
                                    read_csv, run_ablation, run_amplify_sweep, run_pipeline, run_poison_sweep)


def tiny_doc(tmp_path, **over):
    doc = {
        "experiment_id": "tiny",
        "dataset": {"kind": "synthetic-shapes", "n": 48, "size": 8, "seed": 0},
        "T": 10,
        "schedule": {"beta_start": 1e-3, "beta_end": 0.2},
        "architecture": {"name": "TinyUNet", "base": 4, "emb_dim": 8},
        "clean_train": {"steps": 3, "lr": 1e-3, "batch_size": 4},
        "backdoor_train": {"steps": 3, "lr": 1e-3, "batch_size": 4},
        "clean_models": [{"id": "c0", "seed": 0}, {"id": "c1", "seed": 1}],
        "backdoors": [{"id": "b0", "trigger": "box", "target": "diamond", "base": "c0"},
                      {"id": "b1", "trigger": "stripe", "target": "ring", "base": "c1"}],
        "inversion": {"n_mds": 2, "n_dc": 2, "batch_mds": 2, "batch_dc": 2, "max_chain": 3},
        "detection": {"K": 3},
        "evaluation": {"n_asr": 4, "n_tau_refs": 16, "seed": 1},
        "amplify": {"budgets": [2], "n_mds": 1, "trigger": "box", "target": "diamond", "base": "c0"},
        "poison_rates": [0.1, 0.5],
        "poison_sweep": {"trigger": "box", "target": "diamond", "base": "c0"},
        "output_dir": str(tmp_path / "run"),
        "zoo_dir": str(tmp_path / "zoo"),
    }
    doc.update(over)
    return doc


def tiny(tmp_path, **over):
    return ExperimentConfig.from_dict(tiny_doc(tmp_path, **over))


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        tiny(tmp_path, seeds=[])
    with pytest.raises(ValueError):
        tiny(tmp_path, clean_models=[{"id": "c0", "seed": 0}, {"id": "c0", "seed": 1}])
    with pytest.raises(ValueError):
        tiny(tmp_path, backdoors=[{"id": "b", "base": "nope"}])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": "red"})


def test_build_spec_multi_target():
    spec = build_spec({"trigger": "box", "target": ["diamond", "bars", "ring"]}, 16)
    assert spec.target.image.shape == (3, 3, 16, 16)


def test_zoo_caches_models(tmp_path):
    cfg = tiny(tmp_path)
    zoo = Zoo(cfg)
    zoo.clean("c0")
    zoo.backdoored(cfg.backdoors[0])
    assert zoo.trained == ["c0", "b0"]
    again = Zoo(cfg)
    again.clean("c0")
    again.backdoored(cfg.backdoors[0])
    assert again.trained == []
    changed = Zoo(tiny(tmp_path, clean_train={"steps": 4, "lr": 1e-3, "batch_size": 4}))
    changed.clean("c0")
    assert changed.trained == ["c0"]


def test_pipeline_rows_and_crash_isolation(tmp_path):
    bad = {"id": "broken", "trigger": "no-such-trigger", "base": "c0"}
    cfg = tiny(tmp_path, backdoors=tiny_doc(tmp_path)["backdoors"] + [bad])
    summary = run_pipeline(cfg)
    assert summary["n_records"] == 4 and summary["n_errors"] == 1
    rows = read_csv(tmp_path / "run" / "verdicts.csv")
    assert [r["model_id"] for r in rows] == ["c0", "c1", "b0", "b1"]
    assert all(r["l2d"] for r in rows if r["role"] == "backdoored")
    assert "broken" in (tmp_path / "run" / "errors.csv").read_text()
    assert (tmp_path / "run" / "inversions" / "b0_s0" / "trigger.npy").exists()
    metrics = read_csv(tmp_path / "run" / "detection_metrics.csv")
    assert [m["detector"] for m in metrics] == ["combined", "generation"]


def test_kl_rule_with_too_few_clean_models_never_fires(tmp_path):
    summary = run_pipeline(tiny(tmp_path))
    for r in summary["records"]:
        assert math.isinf(r["kl_threshold"]) and r["trigger_flag"] is False


def test_pipeline_is_bit_identical_on_rerun(tmp_path):
    run_pipeline(tiny(tmp_path))
    first = (tmp_path / "run" / "verdicts.csv").read_bytes()
    run_pipeline(tiny(tmp_path, output_dir=str(tmp_path / "again")))
    assert (tmp_path / "again" / "verdicts.csv").read_bytes() == first


def test_sweeps_and_report(tmp_path):
    cfg = tiny(tmp_path)
    out = run_amplify_sweep(cfg)
    rows = read_csv(out / "amplify.csv")
    assert len(rows) == 1 and set(rows[0]) == {"epochs", "asr_original", "asr_reinforced"}
    run_poison_sweep(cfg)
    assert [float(r["poison_rate"]) for r in read_csv(out / "poison_sweep.csv")] == [0.1, 0.5]
    run_ablation(cfg, modes=["two-stage", "mds-only"])
    assert len(read_csv(out / "ablation.csv")) == 4
    run_pipeline(cfg)
    code, paths = emit_report(out)
    names = {p.name for p in paths}
    assert code == 0
    assert {"detection_table.csv", "amplify.png", "poison_sweep.png", "ablation_table.csv", "profile.png"} <= names
    table = read_csv(out / "report" / "detection_table.csv")
    assert set(table[0]) == {"detector", "ACC", "TPR", "TNR"}


def test_empty_report_is_an_error(tmp_path):
    code, paths = emit_report(tmp_path / "empty")
    assert code == 1 and paths == [] and (tmp_path / "empty" / NO_RESULTS).exists()


def test_monotone_trend():
    assert monotone_trend([0.1, 0.1, 0.5])
    assert not monotone_trend([0.5, 0.2])
    assert monotone_trend([0.5, 0.45], tolerance=0.1)


# -- CLI --------------------------------------------------------------------


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_doc(tmp_path)))
    return str(path)


def test_cli_single_model_flow(tmp_path, cfg_file, capsys):
    d = tmp_path
    assert cli.main(["--seed", "1", "--out", str(d / "data"), "synth-data", "--n", "12", "--size", "8"]) == 0
    base = ["--config", cfg_file]
    assert cli.main(base + ["--out", str(d / "clean"), "train-clean", "--data", str(d / "data")]) == 0
    assert cli.main(base + ["--out", str(d / "bd"), "backdoor", "--model", str(d / "clean"),
                            "--data", str(d / "data"), "--trigger", "stripe"]) == 0
    assert (d / "bd" / "spec" / "spec.json").exists()
    assert cli.main(base + ["--out", str(d / "prof"), "profile", "--plot"]) == 0
    assert (d / "prof" / "report" / "profile.png").exists()
    assert cli.main(base + ["--out", str(d / "gprof"), "profile", "--model", str(d / "bd"),
                            "--data", str(d / "data"), "--max-chain", "3"]) == 0
    assert cli.main(base + ["--out", str(d / "inv"), "invert", "--model", str(d / "bd"),
                            "--profile", str(d / "prof" / "profile.json")]) == 0
    assert cli.main(base + ["--out", str(d / "verdicts.jsonl"), "detect", "--model", str(d / "bd"),
                            "--inversion", str(d / "inv"), "--kl-threshold", "2.0"]) == 0
    verdict = json.loads((d / "verdicts.jsonl").read_text().splitlines()[0])
    assert verdict["config"]["kl_threshold"] == 2.0
    assert cli.main(base + ["--out", str(d / "amp"), "amplify", "--model", str(d / "clean"),
                            "--data", str(d / "data"), "--n-mds", "0"]) == 0
    orig = np.load(d / "amp" / "reinforced.npy")
    assert orig.shape == (3, 8, 8)


def test_cli_sweep_partial_and_fatal_exit_codes(tmp_path):
    doc = tiny_doc(tmp_path)
    doc["backdoors"].append({"id": "broken", "trigger": "no-such-trigger", "base": "c0"})
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps(doc))
    assert cli.main(["--config", str(partial), "sweep"]) == 2
    assert cli.main(["report", str(tmp_path / "run")]) == 0
    assert cli.main(["report", str(tmp_path / "nothing")]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.json"), "sweep"]) == 1
    assert cli.main(["invert", "--model", str(tmp_path / "nope")]) == 1


def test_cli_requires_a_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
