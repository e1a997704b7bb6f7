"""Supervised training on the labeled source domain (pipeline stage 0)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .layers import Network
from .losses import cross_entropy, cross_entropy_grad, softmax
from .optim import SGD, Schedule


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch index blocks; drops a trailing singleton (batchnorm)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        block = perm[start : start + batch_size]
        if len(block) >= 2:
            yield block


@dataclass
class SourceConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    smoothing: float = 0.1
    schedule: str = "cosine"


def train_source(net: Network, dataset: Dataset, cfg: SourceConfig,
                 rng: np.random.Generator) -> tuple[Network, list[dict]]:
    """Minimize label-smoothed cross-entropy; returns the net and loss history."""
    if dataset.labels is None:
        raise ConfigError("source training needs labels")
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = max(1, len(dataset) // cfg.batch_size)
    sched = Schedule(cfg.schedule, cfg.lr, total_steps=max(1, cfg.epochs * steps_per_epoch))
    net.train()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in minibatches(len(dataset), cfg.batch_size, rng):
            logits, caches = net.forward(dataset.features[idx], record=True)
            probs = softmax(logits)
            loss = cross_entropy(probs, dataset.labels[idx], cfg.smoothing)
            net.zero_grad()
            net.backward(caches, cross_entropy_grad(probs, dataset.labels[idx], cfg.smoothing))
            opt.step(lr=sched.lr_at(min(step, sched.total_steps)))
            losses.append(loss.scalar)
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    net.eval()
    return net, history
