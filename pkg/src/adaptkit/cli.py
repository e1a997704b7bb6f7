"""Command-line interface.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, harness
from .adapt import AdaptConfig, adapt
from .data import (GeneratorSpec, ImbalanceSpec, ShiftSpec, apply_shift,
                   generate, load_dataset, save_dataset, subsample_longtail)
from .distill import CalibrateConfig, DistillConfig, PhaseSchedule, calibrate_classifier, distill
from .errors import ConfigError, NumericalError, StorageError
from .layers import ArchSpec, build_network
from .metrics import evaluate
from .selfsup import ContrastiveConfig, InitializedStudent, pretrain
from .source import SourceConfig, train_source


def _load_cfg_section(path, section, cls):
    if not path:
        return cls()
    d = json.loads(Path(path).read_text()) if not str(path).endswith((".yaml", ".yml")) \
        else __import__("yaml").safe_load(Path(path).read_text())
    return harness._subconfig(cls, d.get(section, d) if isinstance(d, dict) else {})


def cmd_gen_data(args) -> int:
    spec = GeneratorSpec(n_per_class=args.n_per_class, num_classes=args.classes,
                         input_dim=args.dim, ring_radius=args.ring_radius,
                         cluster_sigma=args.cluster_sigma, ambient_scale=args.ambient_scale,
                         seed=args.seed, geometry_seed=args.geometry_seed)
    ds = generate(spec)
    if args.imbalance_ratio is not None:
        ds = subsample_longtail(ds, ImbalanceSpec(args.imbalance_ratio, args.seed))
    if args.shift_kind:
        ds = apply_shift(ds, ShiftSpec(args.shift_kind, args.magnitude, args.shift_seed))
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds)} rows, {ds.dim} dims, {ds.num_classes} classes, "
          f"domain={ds.domain_tag}")
    return 0


def cmd_train_source(args) -> int:
    ds = load_dataset(args.data)
    cfg = _load_cfg_section(args.config, "source_cfg", SourceConfig)
    arch = ArchSpec(ds.dim, tuple(args.hidden), ds.num_classes)
    rng = harness.stream(args.seed, "stage0")
    net = build_network(arch, rng)
    net, history = train_source(net, ds, cfg, rng)
    checkpoint.save_checkpoint(net, args.out)
    print(f"wrote {args.out}: final loss {history[-1]['loss']:.4f}")
    return 0


def cmd_adapt(args) -> int:
    net, _ = checkpoint.load_checkpoint(args.source)
    ds = load_dataset(args.target)
    cfg = _load_cfg_section(args.config, "adapt_cfg", AdaptConfig)
    net, report = adapt(net, ds.unlabeled_view(), cfg, harness.stream(args.seed, "stage1"))
    checkpoint.save_checkpoint(net, args.out)
    payload = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    if args.report:
        Path(args.report).write_text(payload + "\n")
    else:
        print(payload)
    return 0


def cmd_pretrain(args) -> int:
    ds = load_dataset(args.target)
    cfg = _load_cfg_section(args.config, "contrastive_cfg", ContrastiveConfig)
    arch = ArchSpec(ds.dim, tuple(args.hidden), ds.num_classes)
    student = pretrain(arch, ds.unlabeled_view(), cfg, harness.stream(args.seed, "stage2"))
    checkpoint.save_backbone(arch, [harness._named(n, a) for n, a in
                                    sorted(student.tensors.items())], args.out)
    first, last = student.loss_history[0]["infonce"], student.loss_history[-1]["infonce"]
    print(f"wrote {args.out}: infonce {first:.4f} -> {last:.4f}")
    return 0


def cmd_distill(args) -> int:
    teacher, _ = checkpoint.load_checkpoint(args.teacher)
    ds = load_dataset(args.target)
    cfg = _load_cfg_section(args.config, "distill_cfg", DistillConfig)
    cfg.schedule = PhaseSchedule(args.phases, args.epochs_per_phase,
                                 args.soft_interleave, args.soft_epochs)
    if args.student_init:
        arch, tensors, _ = checkpoint.load_backbone(args.student_init)
        pretrained = InitializedStudent(arch, tensors, "contrastive")
        init_kind = "contrastive"
    else:
        arch = ArchSpec(ds.dim, tuple(args.hidden), ds.num_classes)
        pretrained, init_kind = None, "random"
    student, trace = distill(teacher, init_kind, arch, pretrained, ds.unlabeled_view(),
                             cfg, harness.stream(args.seed, "stage3"))
    checkpoint.save_checkpoint(student, args.out)
    if args.trace:
        Path(args.trace).write_text(json.dumps(trace, sort_keys=True, indent=2) + "\n")
    print(f"wrote {args.out}: {len(trace)} phases")
    return 0


def cmd_calibrate(args) -> int:
    net, _ = checkpoint.load_checkpoint(args.model)
    ds = load_dataset(args.target)
    cfg = _load_cfg_section(args.config, "calibrate_cfg", CalibrateConfig)
    scale, net = calibrate_classifier(net, ds.unlabeled_view(), cfg,
                                      harness.stream(args.seed, "calibrate"))
    checkpoint.save_checkpoint(net, args.out)
    print(f"wrote {args.out}: scales {np.array2string(scale.s, precision=3)}")
    return 0


def cmd_evaluate(args) -> int:
    net, _ = checkpoint.load_checkpoint(args.model)
    ds = load_dataset(args.data)
    counts = None
    if args.train_data:
        counts = load_dataset(args.train_data).class_counts
    report = evaluate(net, ds, train_counts=counts)
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    if args.out:
        cfg = replace(cfg, outdir=args.out)
    result = harness.run_experiment(cfg)
    summary = result["summary"]
    for stage, m in summary["stages"].items():
        print(f"{stage}: acc median {100 * m['overall_acc']['median']:.1f} "
              f"(IQR {100 * m['overall_acc']['iqr']:.1f})")
    if summary["num_failed"]:
        print(f"{summary['num_failed']} seed(s) failed; see per-seed reports")
    return 0


def cmd_compare(args) -> int:
    text, table = harness.compare(args.reports)
    print(text)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            csv.writer(f).writerows(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptkit",
                                description="Test-time adaptation pipeline on synthetic shift benchmarks")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--n-per-class", type=int, default=500)
    g.add_argument("--ring-radius", type=float, default=5.0)
    g.add_argument("--cluster-sigma", type=float, default=1.0)
    g.add_argument("--ambient-scale", type=float, default=3.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--geometry-seed", type=int, default=7)
    g.add_argument("--shift-kind", choices=["rotation", "scale", "translate", "composite"])
    g.add_argument("--magnitude", type=float, default=45.0)
    g.add_argument("--shift-seed", type=int, default=1)
    g.add_argument("--imbalance-ratio", type=float)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-source", help="stage 0: supervised source training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--hidden", type=int, nargs="+", default=[64, 64])
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train_source)

    a = sub.add_parser("adapt", help="stage 1: InfoMax test-time adaptation")
    a.add_argument("--source", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--report")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_adapt)

    pr = sub.add_parser("pretrain", help="stage 2: contrastive backbone pretraining")
    pr.add_argument("--target", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--config")
    pr.add_argument("--hidden", type=int, nargs="+", default=[32, 32])
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(fn=cmd_pretrain)

    d = sub.add_parser("distill", help="stage 3: phased teacher-student transfer")
    d.add_argument("--teacher", required=True)
    d.add_argument("--target", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--student-init", help="backbone checkpoint (default: random student)")
    d.add_argument("--hidden", type=int, nargs="+", default=[32, 32])
    d.add_argument("--config")
    d.add_argument("--phases", type=int, default=3)
    d.add_argument("--epochs-per-phase", type=int, default=4)
    d.add_argument("--soft-interleave", action="store_true")
    d.add_argument("--soft-epochs", type=int, default=1)
    d.add_argument("--trace")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_distill)

    c = sub.add_parser("calibrate", help="test-time classifier rescaling")
    c.add_argument("--model", required=True)
    c.add_argument("--target", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_calibrate)

    e = sub.add_parser("evaluate", help="accuracy metrics on a labeled dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--train-data", help="source dataset supplying bucket counts")
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("run", help="full multi-seed pipeline from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    cp = sub.add_parser("compare", help="stage-ablation table from reports")
    cp.add_argument("reports", nargs="+")
    cp.add_argument("--csv")
    cp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except StorageError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
