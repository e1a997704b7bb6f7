import numpy as np
import pytest

from adaptkit.data import (AugmentationPolicy, GeneratorSpec, ShiftSpec,
                           apply_shift, generate)
from adaptkit.errors import ConfigError
from adaptkit.layers import ArchSpec, build_network
from adaptkit.selfsup import (ContrastiveConfig, backbone_fingerprint,
                              backbone_from_teacher, make_student, pretrain,
                              random_backbone)

ARCH = ArchSpec(32, (32, 32), 10)


def default_target(seed=100, shift_seed=200):
    src = generate(GeneratorSpec(seed=seed))
    return apply_shift(src, ShiftSpec("rotation", 45.0, seed=shift_seed))


def linear_probe(student, dataset):
    """Least-squares probe on frozen features, half train / half test."""
    student.eval()
    feats = student.forward_features(dataset.features)
    x = np.hstack([feats, np.ones((len(feats), 1))])
    y = np.eye(dataset.num_classes)[dataset.labels]
    rng = np.random.default_rng(0)
    idx = rng.permutation(len(feats))
    half = len(feats) // 2
    w, *_ = np.linalg.lstsq(x[idx[:half]], y[idx[:half]], rcond=None)
    preds = np.argmax(x[idx[half:]] @ w, axis=1)
    return (preds == dataset.labels[idx[half:]]).mean()


# ---------------------------------------------------------------------------
# pretraining basics


def test_zero_epochs_equals_random_init():
    tgt = default_target()
    view = tgt.unlabeled_view()
    pre = pretrain(ARCH, view, ContrastiveConfig(epochs=0), np.random.default_rng(5))
    fresh = build_network(ARCH, np.random.default_rng(5))
    for t in fresh.representation_parameters() + fresh.state_tensors():
        assert np.array_equal(pre.tensors[t.name], t.data)
    assert pre.loss_history == []


def test_pretrain_deterministic():
    view = default_target().unlabeled_view()
    cfg = ContrastiveConfig(epochs=2)
    a = pretrain(ARCH, view, cfg, np.random.default_rng(3))
    b = pretrain(ARCH, view, cfg, np.random.default_rng(3))
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    assert a.loss_history == b.loss_history


def test_pretrain_never_sees_labels():
    # two datasets with identical features but different labels give the
    # same backbone, since pretraining only consumes the unlabeled view
    tgt = default_target()
    relabeled = default_target()
    relabeled.labels = (relabeled.labels + 1) % relabeled.num_classes
    cfg = ContrastiveConfig(epochs=1)
    a = pretrain(ARCH, tgt.unlabeled_view(), cfg, np.random.default_rng(0))
    b = pretrain(ARCH, relabeled.unlabeled_view(), cfg, np.random.default_rng(0))
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])


def test_small_target_rejected():
    src = generate(GeneratorSpec(n_per_class=10, num_classes=4, input_dim=8, seed=0))
    with pytest.raises(ConfigError, match="too small"):
        pretrain(ArchSpec(8, (8,), 4), src.unlabeled_view(),
                 ContrastiveConfig(epochs=1, batch_size=128), np.random.default_rng(0))


def test_invalid_configs_rejected():
    view = default_target().unlabeled_view()
    with pytest.raises(ConfigError):
        pretrain(ARCH, view, ContrastiveConfig(temperature=0.0), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        pretrain(ARCH, view, ContrastiveConfig(embedding_dim=1), np.random.default_rng(0))


def test_loss_decreases_thirty_percent_median():
    # 5-seed median of the relative improvement after 50 epochs
    drops = []
    for seed in range(5):
        tgt = default_target(seed=100 + seed, shift_seed=200 + seed)
        pre = pretrain(ARCH, tgt.unlabeled_view(), ContrastiveConfig(epochs=50),
                       np.random.default_rng(seed))
        first = pre.loss_history[0]["infonce"]
        last = pre.loss_history[-1]["infonce"]
        drops.append((first - last) / first)
    assert np.median(drops) >= 0.30


def test_probe_gap_vs_random_backbone():
    tgt = default_target()
    view = tgt.unlabeled_view()
    pre = pretrain(ARCH, view, ContrastiveConfig(epochs=100), np.random.default_rng(0))
    contrastive = make_student("contrastive", None, pre, ARCH, np.random.default_rng(1))
    random_student = make_student("random", None, None, ARCH, np.random.default_rng(1))
    gap = linear_probe(contrastive, tgt) - linear_probe(random_student, tgt)
    assert gap >= 0.15


def test_identity_augmentation_gives_no_representation_benefit():
    # negative control: with both views identical, the invariance signal is
    # gone; the loss bottoms out quickly and the learned backbone probes no
    # better than a random one
    tgt = default_target()
    view = tgt.unlabeled_view()
    cfg = ContrastiveConfig(epochs=10, policy=AugmentationPolicy.identity())
    pre = pretrain(ARCH, view, cfg, np.random.default_rng(0))
    degenerate = make_student("contrastive", None, pre, ARCH, np.random.default_rng(1))
    random_student = make_student("random", None, None, ARCH, np.random.default_rng(1))
    assert linear_probe(degenerate, tgt) <= linear_probe(random_student, tgt) + 0.05


# ---------------------------------------------------------------------------
# student construction


def test_make_student_contrastive_copies_backbone_not_classifier():
    view = default_target().unlabeled_view()
    pre = pretrain(ARCH, view, ContrastiveConfig(epochs=1), np.random.default_rng(0))
    student = make_student("contrastive", None, pre, ARCH, np.random.default_rng(9))
    for t in student.representation_parameters() + student.state_tensors():
        assert np.array_equal(t.data, pre.tensors[t.name])
    fresh = build_network(ARCH, np.random.default_rng(9))
    assert np.array_equal(student.classifier.weight.data, fresh.classifier.weight.data)


def test_make_student_source_copy_and_random():
    teacher = build_network(ARCH, np.random.default_rng(2))
    student = make_student("source_copy", teacher, None, ARCH, np.random.default_rng(3))
    assert backbone_fingerprint(student) == backbone_fingerprint(teacher)
    rand = make_student("random", None, None, ARCH, np.random.default_rng(3))
    assert backbone_fingerprint(rand) != backbone_fingerprint(teacher)


def test_make_student_arch_mismatch_rejected():
    teacher = build_network(ArchSpec(32, (64, 64), 10), np.random.default_rng(0))
    with pytest.raises(ConfigError, match="matching architectures"):
        make_student("source_copy", teacher, None, ARCH, np.random.default_rng(0))
    pre = random_backbone(ArchSpec(32, (16,), 10), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        make_student("contrastive", None, pre, ARCH, np.random.default_rng(0))


def test_make_student_missing_inputs_rejected():
    with pytest.raises(ConfigError):
        make_student("contrastive", None, None, ARCH, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        make_student("source_copy", None, None, ARCH, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        make_student("finetuned", None, None, ARCH, np.random.default_rng(0))


def test_backbone_helpers_round_trip():
    net = build_network(ARCH, np.random.default_rng(4))
    snap = backbone_from_teacher(net)
    assert snap.provenance == "source_copy"
    rebuilt = make_student("source_copy", net, None, ARCH, np.random.default_rng(5))
    assert backbone_fingerprint(rebuilt) == backbone_fingerprint(net)
