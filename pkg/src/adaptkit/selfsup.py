"""Contrastive initialization of the student representation (stage 2).

The backbone is trained with in-batch InfoNCE over two independently
strong-augmented views per sample, through a small projection head that is
discarded afterwards. The initializer interface is deliberately pluggable:
make_student accepts contrastive, source_copy, or random backbones.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AugmentationPolicy, UnlabeledView, augment
from .errors import ConfigError, NumericalError
from .layers import ArchSpec, Dense, Network, ReLU, build_network
from .losses import infonce_loss, infonce_loss_grad
from .optim import SGD
from .source import minibatches

INIT_KINDS = ("contrastive", "source_copy", "random")


@dataclass
class ContrastiveConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.2
    embedding_dim: int = 32
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def validate(self) -> "ContrastiveConfig":
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.embedding_dim < 2:
            raise ConfigError("embedding dim must be at least 2")
        return self


@dataclass
class InitializedStudent:
    """Representation-only checkpoint: no classifier parameters."""

    arch: ArchSpec
    tensors: dict[str, np.ndarray]  # representation params + batchnorm stats
    provenance: str  # "contrastive" | "source_copy" | "random"
    loss_history: list[dict] = field(default_factory=list)


def _backbone_snapshot(net: Network) -> dict[str, np.ndarray]:
    out = {}
    for t in net.representation_parameters() + net.state_tensors():
        out[t.name] = t.data.copy()
    return out


class _ProjectionHead:
    """dense-relu-dense, embedding_dim -> embedding_dim -> embedding_dim // 2."""

    def __init__(self, in_dim: int, embed_dim: int, rng: np.random.Generator):
        self.layers = [Dense(in_dim, embed_dim, rng, prefix="head.0"), ReLU(),
                       Dense(embed_dim, max(2, embed_dim // 2), rng, prefix="head.1")]

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train=True)
            caches.append(c)
        return x, caches

    def backward(self, caches, dy):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(cache, dy)
        return dy


def pretrain(arch: ArchSpec, target: UnlabeledView, cfg: ContrastiveConfig,
             rng: np.random.Generator) -> InitializedStudent:
    """Train the backbone of `arch` on unlabeled target data with InfoNCE."""
    cfg.validate()
    if len(target) < 2 * cfg.batch_size:
        raise ConfigError(
            f"target too small for contrastive pretraining: {len(target)} rows, "
            f"need at least {2 * cfg.batch_size}")
    net = build_network(arch, rng)
    head = _ProjectionHead(arch.hidden[-1], cfg.embedding_dim, rng)
    params = net.representation_parameters() + head.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    net.train()
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in minibatches(len(target), cfg.batch_size, rng):
            x = target.features[idx]
            v1 = augment(x, cfg.policy, "strong", rng)
            v2 = augment(x, cfg.policy, "strong", rng)
            f1, c1 = net.forward_features(v1, record=True)
            q, hc1 = head.forward(f1)
            f2, c2 = net.forward_features(v2, record=True)
            k, hc2 = head.forward(f2)
            loss = infonce_loss(q, k, cfg.temperature)
            if not np.isfinite(loss.scalar):
                raise NumericalError("non-finite contrastive loss")
            dq, dk = infonce_loss_grad(q, k, cfg.temperature)
            for p in params:
                p.zero_grad()
            net.backward_features(c1, head.backward(hc1, dq))
            net.backward_features(c2, head.backward(hc2, dk))
            opt.step()
            losses.append(loss.scalar)
        history.append({"epoch": epoch, "infonce": float(np.mean(losses))})
    net.eval()
    return InitializedStudent(arch, _backbone_snapshot(net), "contrastive", history)


def random_backbone(arch: ArchSpec, rng: np.random.Generator) -> InitializedStudent:
    return InitializedStudent(arch, _backbone_snapshot(build_network(arch, rng)), "random")


def backbone_from_teacher(teacher: Network) -> InitializedStudent:
    return InitializedStudent(teacher.arch, _backbone_snapshot(teacher), "source_copy")


def make_student(init_kind: str, teacher: Network | None,
                 pretrained: InitializedStudent | None, arch: ArchSpec,
                 rng: np.random.Generator) -> Network:
    """Build a student: chosen backbone plus a freshly initialized classifier."""
    if init_kind not in INIT_KINDS:
        raise ConfigError(f"unknown student init {init_kind!r}")
    student = build_network(arch, rng)  # classifier init comes from this draw
    if init_kind == "random":
        return student
    if init_kind == "source_copy":
        if teacher is None:
            raise ConfigError("source_copy needs a teacher")
        if teacher.arch != arch:
            raise ConfigError(
                f"source_copy needs matching architectures: {teacher.arch} vs {arch}")
        source = backbone_from_teacher(teacher)
    else:
        if pretrained is None:
            raise ConfigError("contrastive init needs a pretrained backbone")
        if pretrained.arch != arch:
            raise ConfigError(
                f"pretrained backbone is for {pretrained.arch}, student is {arch}")
        source = pretrained
    for t in student.representation_parameters() + student.state_tensors():
        if t.name not in source.tensors:
            raise ConfigError(f"backbone is missing tensor {t.name!r}")
        t.data = source.tensors[t.name].copy()
    return student


def backbone_fingerprint(net: Network) -> str:
    from .tensor import fingerprint_all
    return fingerprint_all(net.representation_parameters() + net.state_tensors())
