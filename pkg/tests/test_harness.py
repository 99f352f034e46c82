import json

import numpy as np
import pytest
import yaml

from progrecal import harness
from progrecal.cli import main
from progrecal.errors import ConfigurationError, MissingArtifactError
from progrecal.harness import ExperimentConfig

TINY = {
    "data": {"n_patients": 40},
    "snapshot": {"epochs": 1, "batch_size": 16, "model": {"width": 16, "depth": 1, "heads": 2, "embed_dim": 32}},
    "temporal": {"epochs": 1, "model": {"feature_dim": 32, "qk_dim": 8, "heads": 2, "frame_channels": [2, 2, 4]}},
    "recal": {"epochs": 3, "hidden": 8},
}


def tiny(task="chest", **changes):
    return ExperimentConfig.from_dict({"task": task, **TINY}).replace(**changes)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({"task": "chest", **TINY}))
    return path


def test_config_roundtrip_yaml_and_json():
    cfg = tiny(seed=5)
    assert ExperimentConfig.from_yaml(cfg.to_yaml()) == cfg
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.to_dict()["schema_version"] == harness.SCHEMA_VERSION


@pytest.mark.parametrize(
    "bad",
    [
        {"unknown": 1},
        {"recal": {"lamda": 0.5}},
        {"schema_version": 99},
        {"ablation": {"loss": "wasserstein"}},
        {"task": "spine"},
        {"recal": {"lam": -1.0}},
        {"snapshot": {"model": {"embed_dim": 64}}},
    ],
)
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(bad)


def test_schema_lists_ablation_values():
    schema = harness.config_schema()
    assert schema["properties"]["ablation"]["properties"]["loss"]["enum"] == ["mmd", "coral", "kl", "bhattacharyya"]
    assert schema["properties"]["ablation"]["properties"]["attention"]["enum"] == ["hierarchical", "global_only", "none"]


def test_run_id_depends_on_config_and_seed():
    assert harness.run_id(tiny()) == harness.run_id(tiny())
    assert harness.run_id(tiny()) != harness.run_id(tiny(seed=1))
    assert harness.run_id(tiny()) != harness.run_id(tiny(**{"recal.lam": 0.1}))
    # downstream changes keep upstream stage keys
    assert harness.stage_keys(tiny())["temporal"] == harness.stage_keys(tiny(**{"recal.lam": 0.1}))["temporal"]


def test_missing_upstream_names_prior_stage(tmp_path):
    cfg = tiny()
    with pytest.raises(MissingArtifactError, match="simulate"):
        harness.pretrain_snapshot(cfg, tmp_path)
    harness.simulate(cfg, tmp_path)
    with pytest.raises(MissingArtifactError, match="pretrain-snapshot"):
        harness.finetune_stage(cfg, tmp_path)
    harness.pretrain_snapshot(cfg, tmp_path)
    with pytest.raises(MissingArtifactError, match="pretrain-temporal"):
        harness.finetune_stage(cfg, tmp_path)
    with pytest.raises(MissingArtifactError, match="finetune"):
        harness.evaluate_stage(cfg, tmp_path)


def test_full_pipeline_reports_paired_baseline(tmp_path):
    res = harness.run_full_pipeline(tiny(), tmp_path)
    s = res["summary"]
    assert {"recal_auc", "baseline_auc", "delta"} <= set(s)
    assert s["delta"] == pytest.approx(s["recal_auc"] - s["baseline_auc"])
    run = tmp_path / "runs" / harness.run_id(tiny())
    for name in ("results.json", "config.json", "history/recal_fold0.csv", "history/baseline_fold0.csv", "embeddings/snapshot_test.npy"):
        assert (run / name).exists(), name
    assert set(res["matched_pairs"]) == {"d_matched", "d_same_class", "d_cross_class"}


def test_results_are_byte_identical_across_runs(tmp_path):
    cfg = tiny(seed=2)
    harness.run_full_pipeline(cfg, tmp_path / "a")
    harness.run_full_pipeline(cfg, tmp_path / "b")
    rid = harness.run_id(cfg)
    a = (tmp_path / "a" / "runs" / rid / "results.json").read_bytes()
    b = (tmp_path / "b" / "runs" / rid / "results.json").read_bytes()
    assert a == b


def test_knee_report_fields(tmp_path):
    res = harness.run_full_pipeline(tiny("knee"), tmp_path)
    for key in ("micro_f1", "balanced_accuracy", "kappa", "ovo_auc_1_2", "ovo_auc_2_3"):
        assert f"recal_{key}" in res["summary"] and f"baseline_{key}" in res["summary"]


def test_cross_validation_folds(tmp_path):
    res = harness.run_full_pipeline(tiny(folds=3), tmp_path)
    assert len(res["reports"]["recal"]) == 3
    total = sum(sum(c) for r in res["reports"]["recal"] for c in [r["class_counts"]])
    assert total == 12 + 8  # finetune and test patients pooled


def test_no_stage_reads_test_split_before_evaluate(tmp_path, monkeypatch):
    seen = []
    real = harness.load_datasets

    def spy(directory, splits=None):
        seen.append(splits)
        return real(directory, splits=splits)

    monkeypatch.setattr(harness, "load_datasets", spy)
    cfg = tiny()
    harness.simulate(cfg, tmp_path)
    harness.pretrain_snapshot(cfg, tmp_path)
    harness.pretrain_temporal(cfg, tmp_path)
    harness.finetune_stage(cfg, tmp_path)
    assert seen and all(s is not None and "snapshot_test" not in s for s in seen)
    harness.evaluate_stage(cfg, tmp_path)
    assert any(s is not None and "snapshot_test" in s for s in seen)


def test_ablate_loss_axis(tmp_path):
    summary = harness.ablate(tiny(), "loss", tmp_path)
    assert list(summary["results"]) == ["mmd", "coral", "kl", "bhattacharyya"]
    for name in ("mmd", "coral", "kl", "bhattacharyya", "baseline"):
        assert name in summary["table"]


@pytest.mark.parametrize("axis, values", [("attention", ["hierarchical", "global_only", "none"]), ("temporal", ["on", "off"])])
def test_ablate_other_axes(axis, values, tmp_path):
    summary = harness.ablate(tiny(), axis, tmp_path)
    assert list(summary["results"]) == values


def test_temporal_off_equals_baseline(tmp_path):
    res = harness.run_full_pipeline(tiny(**{"ablation.temporal": "off"}), tmp_path)
    assert res["summary"]["delta"] == 0.0
    assert not list((tmp_path / "stages").glob("temporal-*"))


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "conv1d_causal" in out and "L_knee" in out and "FAIL" not in out


def test_cli_untrained_evaluate(config_file, tmp_path, capsys):
    assert main(["simulate", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    assert main(["evaluate", "--untrained", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    auc = json.loads(capsys.readouterr().out.split("\n", 1)[1])["auc"]
    assert abs(auc - 0.5) <= 0.1


def test_cli_missing_stage_exits_nonzero(config_file, tmp_path, capsys):
    code = main(["finetune", "--config", str(config_file), "--out", str(tmp_path)])
    assert code != 0
    err = capsys.readouterr().err
    assert err.startswith("error:") and "stage first" in err


def test_cli_invalid_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("recal: {lam: -2}\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) != 0
    assert "lam" in capsys.readouterr().err


def test_cli_env_override(config_file, monkeypatch, capsys):
    monkeypatch.setenv("PROGRECAL_SEED", "7")
    monkeypatch.setenv("PROGRECAL_LAMBDA", "0.25")
    assert main(["show-config", "--config", str(config_file)]) == 0
    shown = yaml.safe_load(capsys.readouterr().out)
    assert shown["seed"] == 7 and shown["recal"]["lam"] == 0.25
    assert main(["show-config", "--config", str(config_file), "--seed", "3"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["seed"] == 3


def test_cli_run_and_ablate(config_file, tmp_path, capsys):
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path), "--lambda", "0.5"]) == 0
    assert "baseline_auc" in capsys.readouterr().out
    assert main(["ablate", "--axis", "loss", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    table = capsys.readouterr().out
    assert all(name in table for name in ("mmd", "coral", "kl", "bhattacharyya"))
