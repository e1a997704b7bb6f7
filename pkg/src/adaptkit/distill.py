"""Phased teacher-student pseudo-label transfer (stage 3) and test-time
classifier rescaling for long-tailed targets.

Each phase: generate pseudo-labels with the current teacher on weakly
augmented data, reset the student backbone to its initial checkpoint, train
the student on strongly augmented data against the pseudo-labels, then
promote the student to teacher. Phases are numbered from 1; with soft-label
interleaving, even-numbered phases swap cross-entropy for KL against the
teacher's full distribution and run a shorter epoch budget.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AugmentationPolicy, UnlabeledView, augment
from .errors import ConfigError, NumericalError
from .layers import ArchSpec, Network
from .losses import (cross_entropy, cross_entropy_grad, kl_soft_loss,
                     kl_soft_loss_grad, softmax)
from .optim import SGD, Schedule
from .selfsup import InitializedStudent, backbone_fingerprint, make_student
from .source import minibatches
from .tensor import fingerprint_all


@dataclass
class PhaseSchedule:
    num_phases: int = 3
    epochs_per_phase: int = 10
    soft_label_interleave: bool = False
    soft_phase_epochs: int = 1

    def validate(self) -> "PhaseSchedule":
        if self.num_phases < 1 or self.epochs_per_phase < 1 or self.soft_phase_epochs < 1:
            raise ConfigError("phase counts and epoch budgets must be at least 1")
        return self

    def mode_for(self, phase: int) -> str:
        """Phase numbering starts at 1; even phases run soft when interleaving."""
        if self.soft_label_interleave and phase % 2 == 0:
            return "soft"
        return "hard"

    def epochs_for(self, phase: int) -> int:
        return self.soft_phase_epochs if self.mode_for(phase) == "soft" else self.epochs_per_phase


@dataclass
class DistillConfig:
    schedule: PhaseSchedule = field(
        default_factory=lambda: PhaseSchedule(epochs_per_phase=4))
    batch_size: int = 128
    lr: float = 0.015
    momentum: float = 0.9
    weight_decay: float = 1e-4
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)


@dataclass
class PseudoLabels:
    hard: np.ndarray  # int64[N], argmax of soft with lowest-index ties
    soft: np.ndarray  # N x C
    teacher_fingerprint: str
    agreement_with_previous: float | None = None


def pseudo_label(teacher: Network, target: UnlabeledView, policy: AugmentationPolicy,
                 rng: np.random.Generator) -> PseudoLabels:
    """Predict on one weakly augmented view of the whole target set."""
    teacher.eval()
    soft = softmax(teacher.forward(augment(target.features, policy, "weak", rng)))
    return PseudoLabels(hard=np.argmax(soft, axis=1).astype(np.int64), soft=soft,
                        teacher_fingerprint=fingerprint_all(teacher.parameters()))


def run_phase(student: Network, labels: PseudoLabels, target: UnlabeledView,
              epochs: int, mode: str, cfg: DistillConfig,
              rng: np.random.Generator) -> Network:
    """Fit the student to the pseudo-labels on strongly augmented data."""
    if mode not in ("hard", "soft"):
        raise ConfigError(f"unknown phase mode {mode!r}")
    if len(labels.hard) != len(target):
        raise ConfigError("pseudo-labels and target data are not aligned")
    opt = SGD(student.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = max(1, len(target) // cfg.batch_size)
    sched = Schedule("cosine", cfg.lr, total_steps=max(1, epochs * steps_per_epoch))
    student.train()
    last_good = student.copy()
    step = 0
    for _ in range(epochs):
        try:
            for idx in minibatches(len(target), cfg.batch_size, rng):
                x = augment(target.features[idx], cfg.policy, "strong", rng)
                logits, caches = student.forward(x, record=True)
                probs = softmax(logits)
                if mode == "hard":
                    dlogits = cross_entropy_grad(probs, labels.hard[idx])
                else:
                    dlogits = kl_soft_loss_grad(probs, labels.soft[idx])
                student.zero_grad()
                student.backward(caches, dlogits)
                opt.step(lr=sched.lr_at(min(step, sched.total_steps)))
                step += 1
        except NumericalError:
            student = last_good
            break
        last_good = student.copy()
    student.eval()
    return student


def distill(teacher: Network, init_kind: str, student_arch: ArchSpec,
            pretrained: InitializedStudent | None, target: UnlabeledView,
            cfg: DistillConfig, rng: np.random.Generator,
            eval_fn=None) -> tuple[Network, list[dict]]:
    """Run the full phase loop; returns the final student and the trace.

    eval_fn, when given, maps a Network to an accuracy in [0, 1]; it is the
    only place evaluation labels may enter, and it never feeds training.
    """
    cfg.schedule.validate()
    trace = []
    prev_hard = None
    student = None
    for phase in range(1, cfg.schedule.num_phases + 1):
        labels = pseudo_label(teacher, target, cfg.policy, rng)
        if prev_hard is not None:
            labels.agreement_with_previous = float((labels.hard == prev_hard).mean())
        prev_hard = labels.hard
        student = make_student(init_kind, teacher, pretrained, student_arch, rng)
        reset_fp = backbone_fingerprint(student)
        mode = cfg.schedule.mode_for(phase)
        epochs = cfg.schedule.epochs_for(phase)
        student = run_phase(student, labels, target, epochs, mode, cfg, rng)
        entry = {"phase": phase, "mode": mode, "epochs": epochs,
                 "backbone_reset_fingerprint": reset_fp,
                 "teacher_fingerprint": labels.teacher_fingerprint,
                 "pseudo_label_agreement": labels.agreement_with_previous}
        if eval_fn is not None:
            entry["accuracy"] = float(eval_fn(student))
        trace.append(entry)
        teacher = student
    return student, trace


# ---------------------------------------------------------------------------
# test-time classifier rescaling for long-tailed sources


@dataclass
class ScaleVector:
    s: np.ndarray  # strictly positive, one scale per class

    def __post_init__(self):
        if np.any(self.s <= 0):
            raise ConfigError("classifier scales must be strictly positive")


@dataclass
class CalibrateConfig:
    rounds: int = 3
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)


def _scaled_logits(model: Network, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    feats = model.forward_features(x)
    w, b = model.classifier.weight.data, model.classifier.bias.data
    return feats @ (s[:, None] * w).T + b


def calibrate_classifier(model: Network, target: UnlabeledView, cfg: CalibrateConfig,
                         rng: np.random.Generator) -> tuple[ScaleVector, Network]:
    """Learn per-class classifier scales from pseudo-labels; everything else frozen.

    Each pseudo-label class contributes equally to the fit regardless of how
    often it is predicted. Without that reweighting the head classes dominate
    the objective and the scales drift further toward them; with it the
    rarely-predicted classes get the larger scales, which is what rebalances
    the class prior at test time.
    """
    model = model.copy()
    model.eval()
    num_classes = model.arch.num_classes
    s = np.ones(num_classes)
    velocity = np.zeros(num_classes)
    w = model.classifier.weight.data
    feats_all = model.forward_features(target.features)
    raw_scores = feats_all @ w.T  # unscaled class scores, reused every step
    bias = model.classifier.bias.data
    for _ in range(cfg.rounds):
        # refresh pseudo-labels with the current scales
        probs = softmax(_scaled_logits(model, augment(
            target.features, cfg.policy, "weak", rng), s))
        hard = np.argmax(probs, axis=1).astype(np.int64)
        counts = np.bincount(hard, minlength=num_classes).astype(float)
        weights = np.where(counts[hard] > 0, 1.0 / counts[hard], 0.0)
        weights *= len(hard) / weights.sum()
        for _ in range(cfg.epochs):
            for idx in minibatches(len(target), cfg.batch_size, rng):
                logits = raw_scores[idx] * s + bias
                p = softmax(logits)
                if not np.all(np.isfinite(p)):
                    raise NumericalError("non-finite probabilities during calibration")
                dlogits = cross_entropy_grad(p, hard[idx]) * weights[idx][:, None]
                grad_s = (dlogits * raw_scores[idx]).sum(axis=0)
                velocity = cfg.momentum * velocity + grad_s
                s = np.maximum(s - cfg.lr * velocity, 1e-3)
    calibrated = model.copy()
    calibrated.classifier.weight.data = s[:, None] * calibrated.classifier.weight.data
    return ScaleVector(s), calibrated
