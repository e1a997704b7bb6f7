"""Experiment orchestration: declarative configs, stage composition,
multi-seed runs, and machine-readable outputs.

All randomness flows from one master seed per run through named, stage-scoped
substreams, so toggling one stage never perturbs another stage's draws.
report.json carries only deterministic content; wall-clock timings go to a
separate timings.json that is excluded from determinism guarantees.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from . import checkpoint
from .adapt import AdaptConfig, adapt
from .data import (AugmentationPolicy, Dataset, GeneratorSpec, ImbalanceSpec,
                   ShiftSpec, apply_shift, generate, load_dataset, save_dataset,
                   subsample_longtail)
from .distill import (CalibrateConfig, DistillConfig, PhaseSchedule,
                      calibrate_classifier, distill)
from .errors import AdaptkitError, ConfigError
from .layers import ArchSpec, build_network
from .metrics import MetricsReport, evaluate
from .selfsup import ContrastiveConfig, pretrain
from .source import SourceConfig, train_source

SCHEMA_VERSION = 1

_STREAMS = {
    "source_data": 11, "target_data": 12, "imbalance": 13,
    "stage0": 21, "stage1": 22, "stage2": 23, "stage3": 24, "calibrate": 25,
    "probe": 31,
}


def stream_seed(master_seed: int, name: str) -> int:
    if name not in _STREAMS:
        raise ConfigError(f"unknown rng stream {name!r}")
    return int(np.random.SeedSequence([master_seed, _STREAMS[name]]).generate_state(1)[0])


def stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, _STREAMS[name]]))


def _subconfig(cls, d: dict | None):
    d = dict(d or {})
    if "policy" in d and isinstance(d["policy"], dict):
        pd = dict(d["policy"])
        if "scale_range" in pd:
            pd["scale_range"] = tuple(pd["scale_range"])
        d["policy"] = AugmentationPolicy(**pd)
    if "schedule" in d and isinstance(d["schedule"], dict):
        d["schedule"] = PhaseSchedule(**d["schedule"])
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    benchmark: GeneratorSpec = field(default_factory=GeneratorSpec)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    imbalance_ratio: float | None = None  # set for the long-tailed benchmark
    stage1: bool = True
    stage2: bool = True
    stage3: bool = True
    calibrate: bool = False
    teacher_hidden: tuple[int, ...] = (64, 64)
    student_hidden: tuple[int, ...] = (32, 32)
    source_cfg: SourceConfig = field(default_factory=SourceConfig)
    adapt_cfg: AdaptConfig = field(default_factory=AdaptConfig)
    contrastive_cfg: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    distill_cfg: DistillConfig = field(default_factory=DistillConfig)
    calibrate_cfg: CalibrateConfig = field(default_factory=CalibrateConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    outdir: str = "runs/default"
    source_data: str | None = None  # dataset file overrides the generator
    target_data: str | None = None
    source_checkpoint: str | None = None  # skip stage 0

    def __post_init__(self):
        if self.stage2 and not self.stage3:
            raise ConfigError("stage 2 output is only consumed by stage 3")

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, cls in [("benchmark", GeneratorSpec), ("shift", ShiftSpec)]:
            if isinstance(d.get(key), dict):
                d[key] = cls(**d[key])
        for key, cls in [("source_cfg", SourceConfig), ("adapt_cfg", AdaptConfig),
                         ("contrastive_cfg", ContrastiveConfig),
                         ("distill_cfg", DistillConfig), ("calibrate_cfg", CalibrateConfig)]:
            if key in d:
                d[key] = _subconfig(cls, d[key]) if isinstance(d[key], dict) else d[key]
        for key in ("teacher_hidden", "student_hidden", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return ExperimentConfig(**d)

    def to_dict(self) -> dict:
        def conv(v):
            if hasattr(v, "to_dict"):
                return v.to_dict()
            if hasattr(v, "__dataclass_fields__"):
                return {k: conv(getattr(v, k)) for k in v.__dataclass_fields__}
            if isinstance(v, tuple):
                return list(v)
            return v
        return {f.name: conv(getattr(self, f.name)) for f in fields(self)}

    def stage_label(self) -> str:
        on = [n for n, f in [("1", self.stage1), ("2", self.stage2),
                             ("3", self.stage3), ("cal", self.calibrate)] if f]
        return "source-only" if not on else "stage" + "+".join(on)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        d = yaml.safe_load(text)
    else:
        d = json.loads(text)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------


def make_datasets(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Build (or load) the source and target datasets for one master seed."""
    if cfg.source_data and cfg.target_data:
        return load_dataset(cfg.source_data), load_dataset(cfg.target_data)
    spec = replace(cfg.benchmark, seed=stream_seed(seed, "source_data"))
    src = generate(spec)
    if cfg.imbalance_ratio is not None:
        src = subsample_longtail(src, ImbalanceSpec(cfg.imbalance_ratio,
                                                    stream_seed(seed, "imbalance")))
    shift = replace(cfg.shift, seed=stream_seed(seed, "target_data"))
    tgt = apply_shift(src if cfg.imbalance_ratio is None else generate(spec), shift)
    tgt.bucket_thresholds = src.bucket_thresholds
    return src, tgt


def _eval(model, tgt: Dataset, src: Dataset) -> MetricsReport:
    counts = src.class_counts if src.bucket_thresholds else None
    return evaluate(model, tgt, train_counts=counts, thresholds=src.bucket_thresholds)


def run_seed(cfg: ExperimentConfig, seed: int, outdir: Path) -> dict:
    """Execute the enabled stages for one seed and write its artifacts."""
    outdir.mkdir(parents=True, exist_ok=True)
    src, tgt = make_datasets(cfg, seed)
    view = tgt.unlabeled_view()
    report: dict = {"schema_version": SCHEMA_VERSION, "seed": seed,
                    "label": cfg.stage_label(), "metrics": {}}

    teacher_arch = ArchSpec(src.dim, cfg.teacher_hidden, src.num_classes)
    if cfg.source_checkpoint:
        model, _ = checkpoint.load_checkpoint(cfg.source_checkpoint, expect_arch=teacher_arch)
    else:
        model = build_network(teacher_arch, stream(seed, "stage0"))
        model, _ = train_source(model, src, cfg.source_cfg, stream(seed, "stage0"))
        checkpoint.save_checkpoint(model, outdir / "source.ckpt")
    report["metrics"]["source_only"] = _eval(model, tgt, src).to_dict()

    if cfg.stage1:
        model, adapt_report = adapt(model, view, cfg.adapt_cfg, stream(seed, "stage1"))
        checkpoint.save_checkpoint(model, outdir / "stage1.ckpt")
        report["adapt"] = adapt_report.to_dict()
        report["metrics"]["stage1"] = _eval(model, tgt, src).to_dict()
    teacher = model

    pretrained = None
    if cfg.stage2:
        student_arch = ArchSpec(src.dim, cfg.student_hidden, src.num_classes)
        pretrained = pretrain(student_arch, view, cfg.contrastive_cfg, stream(seed, "stage2"))
        checkpoint.save_backbone(student_arch,
                                 [_named(n, a) for n, a in sorted(pretrained.tensors.items())],
                                 outdir / "backbone.ckpt")
        report["contrastive"] = {"loss_history": pretrained.loss_history}

    if cfg.stage3:
        student_arch = ArchSpec(src.dim, cfg.student_hidden, src.num_classes)
        init_kind = "contrastive" if cfg.stage2 else "random"
        model, trace = distill(teacher, init_kind, student_arch, pretrained, view,
                               cfg.distill_cfg, stream(seed, "stage3"),
                               eval_fn=lambda net: _eval(net, tgt, src).overall_acc)
        checkpoint.save_checkpoint(model, outdir / "stage3.ckpt")
        report["distill"] = {"init_kind": init_kind, "trace": trace}
        report["metrics"]["stage3"] = _eval(model, tgt, src).to_dict()

    if cfg.calibrate:
        scale, model = calibrate_classifier(model, view, cfg.calibrate_cfg,
                                            stream(seed, "calibrate"))
        checkpoint.save_checkpoint(model, outdir / "calibrated.ckpt")
        report["calibration"] = {"scales": [float(v) for v in scale.s]}
        report["metrics"]["calibrated"] = _eval(model, tgt, src).to_dict()

    _write_report_files(report, outdir)
    return report


def _named(name, arr):
    from .tensor import Tensor
    return Tensor(arr, name=name)


def _write_report_files(report: dict, outdir: Path) -> None:
    (outdir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    with open(outdir / "per_class.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "class", "eval_count", "accuracy"])
        for stage, m in report["metrics"].items():
            for c, (acc, cnt) in enumerate(zip(m["per_class"], m["per_class_counts"])):
                w.writerow([stage, c, cnt, f"{acc:.6f}"])
    with open(outdir / "trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["section", "index", "metric", "value"])
        for e in report.get("adapt", {}).get("epochs", []):
            for k in ("entropy", "diversity", "infomax"):
                w.writerow(["adapt", e["epoch"], k, f"{e[k]:.9f}"])
        for e in report.get("contrastive", {}).get("loss_history", []):
            w.writerow(["contrastive", e["epoch"], "infonce", f"{e['infonce']:.9f}"])
        for e in report.get("distill", {}).get("trace", []):
            if "accuracy" in e:
                w.writerow(["distill", e["phase"], "accuracy", f"{e['accuracy']:.9f}"])


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every seed (parallelism capped by OTA_THREADS) and summarize."""
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    workers = max(1, int(os.environ.get("OTA_THREADS", "1")))
    timings = {}

    def one(seed: int) -> dict:
        t0 = perf_counter()
        try:
            rep = run_seed(cfg, seed, outdir / f"seed_{seed}")
        except AdaptkitError as e:
            rep = {"schema_version": SCHEMA_VERSION, "seed": seed,
                   "label": cfg.stage_label(), "error": str(e)}
            (outdir / f"seed_{seed}").mkdir(parents=True, exist_ok=True)
            (outdir / f"seed_{seed}" / "report.json").write_text(
                json.dumps(rep, sort_keys=True, indent=2) + "\n")
        timings[seed] = perf_counter() - t0
        return rep

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, cfg.seeds))
    else:
        reports = [one(s) for s in cfg.seeds]

    summary = summarize(reports)
    summary["config"] = cfg.to_dict()
    (outdir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (outdir / "timings.json").write_text(json.dumps(
        {"seconds_per_seed": {str(k): round(v, 3) for k, v in sorted(timings.items())}},
        sort_keys=True, indent=2) + "\n")
    return {"reports": reports, "summary": summary}


def summarize(reports: list[dict]) -> dict:
    """Median and IQR per stage metric over the successful seeds."""
    ok = [r for r in reports if "error" not in r]
    stages: dict[str, dict] = {}
    for stage in sorted({s for r in ok for s in r["metrics"]}):
        entry = {}
        for metric in ("overall_acc", "class_mean_acc"):
            vals = [r["metrics"][stage][metric] for r in ok if stage in r["metrics"]]
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            entry[metric] = {"median": float(med), "iqr": float(q3 - q1)}
        stages[stage] = entry
    return {"schema_version": SCHEMA_VERSION, "stages": stages,
            "num_seeds": len(reports), "num_failed": len(reports) - len(ok)}


# ---------------------------------------------------------------------------
# stage-ablation comparison tables


def compare(paths: list[str]) -> tuple[str, list[list[str]]]:
    """Align reports/summaries into a text table plus CSV rows."""
    if not paths:
        raise ConfigError("compare needs at least one report")
    rows = []
    max_phases = 0
    for path in paths:
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema version mismatch")
        if "stages" in d:  # summary file
            for stage, m in sorted(d["stages"].items()):
                rows.append({"config": f"{Path(path).parent.name}:{stage}",
                             "acc": m["overall_acc"]["median"],
                             "avg": m["class_mean_acc"]["median"], "phases": []})
        else:  # single-seed report
            metrics = d.get("metrics", {})
            final = _final_stage(metrics)
            phases = [e["accuracy"] for e in d.get("distill", {}).get("trace", [])
                      if "accuracy" in e]
            rows.append({"config": f"{d.get('label', Path(path).parent.name)}"
                                   f"(seed {d.get('seed')})",
                         "acc": metrics.get(final, {}).get("overall_acc"),
                         "avg": metrics.get(final, {}).get("class_mean_acc"),
                         "phases": phases})
            max_phases = max(max_phases, len(phases))
    rows.sort(key=lambda r: r["config"])
    header = ["config", "acc", "avg"] + [f"phase{i + 1}" for i in range(max_phases)]
    table = [header]
    for r in rows:
        cells = [r["config"], _fmt(r["acc"]), _fmt(r["avg"])]
        cells += [_fmt(r["phases"][i]) if i < len(r["phases"]) else "-"
                  for i in range(max_phases)]
        table.append(cells)
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    text = "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in table)
    return text, table


def _final_stage(metrics: dict) -> str:
    for stage in ("calibrated", "stage3", "stage1", "source_only"):
        if stage in metrics:
            return stage
    return "source_only"


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:.1f}"
