import json

import numpy as np
import pytest

from adaptkit import cli
from adaptkit.adapt import AdaptConfig
from adaptkit.data import Dataset, GeneratorSpec, ShiftSpec, generate, save_dataset
from adaptkit.distill import DistillConfig, PhaseSchedule
from adaptkit.errors import ConfigError
from adaptkit.harness import (SCHEMA_VERSION, ExperimentConfig, compare,
                              load_config, run_experiment, run_seed, stream_seed,
                              summarize)
from adaptkit.selfsup import ContrastiveConfig
from adaptkit.source import SourceConfig


def tiny_config(**kw):
    defaults = dict(
        benchmark=GeneratorSpec(n_per_class=70, num_classes=4, input_dim=8),
        shift=ShiftSpec("rotation", 45.0),
        teacher_hidden=(12,),
        student_hidden=(8,),
        source_cfg=SourceConfig(epochs=3, batch_size=32),
        adapt_cfg=AdaptConfig(epochs=1, batch_size=32),
        contrastive_cfg=ContrastiveConfig(epochs=2, batch_size=64),
        distill_cfg=DistillConfig(
            schedule=PhaseSchedule(num_phases=2, epochs_per_phase=1), batch_size=32),
        seeds=(0, 1),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


# ---------------------------------------------------------------------------
# seed streams


def test_stream_seed_stable_and_stage_scoped():
    assert stream_seed(0, "stage1") == stream_seed(0, "stage1")
    assert stream_seed(0, "stage1") != stream_seed(0, "stage2")
    assert stream_seed(0, "stage1") != stream_seed(1, "stage1")
    with pytest.raises(ConfigError):
        stream_seed(0, "stage9")


# ---------------------------------------------------------------------------
# config handling


def test_stage2_requires_stage3():
    with pytest.raises(ConfigError):
        ExperimentConfig(stage2=True, stage3=False)


def test_unknown_config_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"stage_one": True})
    with pytest.raises(ConfigError, match="unknown AdaptConfig keys"):
        ExperimentConfig.from_dict({"adapt_cfg": {"learning_rate": 0.1}})


def test_config_round_trip_via_dict():
    cfg = tiny_config()
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_load_config_json_and_yaml(tmp_path):
    d = {"seeds": [3], "stage2": False, "stage3": False,
         "adapt_cfg": {"epochs": 1, "lr": 0.001}}
    j = tmp_path / "cfg.json"
    j.write_text(json.dumps(d))
    cfg = load_config(j)
    assert cfg.seeds == (3,) and cfg.adapt_cfg.lr == 0.001
    y = tmp_path / "cfg.yaml"
    y.write_text("seeds: [3]\nstage2: false\nstage3: false\n"
                 "adapt_cfg:\n  epochs: 1\n  lr: 0.001\n")
    assert load_config(y) == cfg


def test_stage_labels():
    assert tiny_config(stage1=False, stage2=False, stage3=False).stage_label() \
        == "source-only"
    assert tiny_config().stage_label() == "stage1+2+3"
    assert tiny_config(stage2=False).stage_label() == "stage1+3"


# ---------------------------------------------------------------------------
# execution


def test_run_seed_byte_identical(tmp_path):
    cfg = tiny_config()
    run_seed(cfg, 0, tmp_path / "a")
    run_seed(cfg, 0, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() \
        == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "per_class.csv").read_bytes() \
        == (tmp_path / "b" / "per_class.csv").read_bytes()
    assert (tmp_path / "a" / "trace.csv").read_bytes() \
        == (tmp_path / "b" / "trace.csv").read_bytes()


def test_stage_streams_isolated(tmp_path):
    # toggling later stages must not change earlier-stage results
    full = run_seed(tiny_config(), 0, tmp_path / "full")
    st1 = run_seed(tiny_config(stage2=False, stage3=False), 0, tmp_path / "st1")
    assert full["metrics"]["stage1"] == st1["metrics"]["stage1"]
    assert full["metrics"]["source_only"] == st1["metrics"]["source_only"]


def test_run_experiment_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("OTA_THREADS", "2")
    cfg = tiny_config(outdir=str(tmp_path / "exp"))
    result = run_experiment(cfg)
    assert len(result["reports"]) == 2
    summary = json.loads((tmp_path / "exp" / "summary.json").read_text())
    assert summary["num_seeds"] == 2 and summary["num_failed"] == 0
    assert "stage3" in summary["stages"]
    # wall-clock timings live outside the deterministic report
    timings = json.loads((tmp_path / "exp" / "timings.json").read_text())
    assert set(timings["seconds_per_seed"]) == {"0", "1"}
    per_seed = json.loads((tmp_path / "exp" / "seed_0" / "report.json").read_text())
    assert "seconds" not in json.dumps(per_seed)


def test_parallel_matches_serial(tmp_path, monkeypatch):
    cfg = tiny_config(stage2=False, stage3=False)
    monkeypatch.setenv("OTA_THREADS", "1")
    run_experiment(ExperimentConfig(**{**cfg.__dict__, "outdir": str(tmp_path / "s")}))
    monkeypatch.setenv("OTA_THREADS", "2")
    run_experiment(ExperimentConfig(**{**cfg.__dict__, "outdir": str(tmp_path / "p")}))
    for seed in (0, 1):
        assert (tmp_path / "s" / f"seed_{seed}" / "report.json").read_bytes() \
            == (tmp_path / "p" / f"seed_{seed}" / "report.json").read_bytes()


# ---------------------------------------------------------------------------
# summaries and comparison


def test_summarize_median_and_iqr():
    def rep(seed, acc):
        return {"seed": seed, "metrics": {"stage1": {
            "overall_acc": acc, "class_mean_acc": acc}}}
    out = summarize([rep(0, 0.2), rep(1, 0.4), rep(2, 0.6),
                     {"seed": 3, "error": "boom"}])
    assert out["stages"]["stage1"]["overall_acc"]["median"] == pytest.approx(0.4)
    assert out["stages"]["stage1"]["overall_acc"]["iqr"] == pytest.approx(0.2)
    assert out["num_seeds"] == 4 and out["num_failed"] == 1


def test_compare_renders_missing_cells(tmp_path):
    a = {"schema_version": SCHEMA_VERSION, "seed": 0, "label": "stage1",
         "metrics": {"stage1": {"overall_acc": 0.5, "class_mean_acc": 0.4}}}
    b = {"schema_version": SCHEMA_VERSION, "seed": 0, "label": "stage1+3",
         "metrics": {"stage3": {"overall_acc": 0.7, "class_mean_acc": 0.6}},
         "distill": {"trace": [{"phase": 1, "accuracy": 0.65},
                               {"phase": 2, "accuracy": 0.7}]}}
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    pa.write_text(json.dumps(a))
    pb.write_text(json.dumps(b))
    text, table = compare([str(pa), str(pb)])
    assert "-" in text  # stage1 run has no phase columns
    assert table[0][:3] == ["config", "acc", "avg"]
    assert any("50.0" in " ".join(row) for row in table)


def test_compare_rejects_schema_mismatch(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"schema_version": 99, "metrics": {}}))
    with pytest.raises(ConfigError, match="schema"):
        compare([str(p)])
    with pytest.raises(ConfigError):
        compare([])


# ---------------------------------------------------------------------------
# CLI exit codes


def test_cli_gen_data_and_evaluate_flow(tmp_path):
    data = str(tmp_path / "src.ds")
    ckpt = str(tmp_path / "net.ckpt")
    assert cli.main(["gen-data", "--out", data, "--classes", "4", "--dim", "8",
                     "--n-per-class", "40"]) == 0
    assert cli.main(["train-source", "--data", data, "--out", ckpt,
                     "--hidden", "10"]) == 0
    assert cli.main(["evaluate", "--model", ckpt, "--data", data]) == 0


def test_cli_missing_file_is_io_error(tmp_path):
    assert cli.main(["evaluate", "--model", str(tmp_path / "nope.ckpt"),
                     "--data", str(tmp_path / "nope.ds")]) == 3


def test_cli_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage_one": True}))
    assert cli.main(["run", "--config", str(bad)]) == 1


def test_cli_numerical_error(tmp_path):
    ds = generate(GeneratorSpec(n_per_class=40, num_classes=4, input_dim=8, seed=0))
    ds.features[0, 0] = np.inf
    path = tmp_path / "inf.ds"
    save_dataset(ds, path)
    assert cli.main(["train-source", "--data", str(path),
                     "--out", str(tmp_path / "x.ckpt"), "--hidden", "8"]) == 2
